//! Two-branch encoder over part-feature sets.
//!
//! A shared trunk (stem projection plus residual MLP blocks) is applied to
//! every part vector. Branch A stacks its own residual blocks, projects to the
//! feature width and mean-pools over parts; branch M does the same with one
//! extra block and max pooling. Each branch feeds a bias-free classifier whose
//! rows are re-initialized from cluster means during adaptation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, AbmtError, Result};
use crate::tensor::{Graph, Pooling, Tensor, Var};

/// Guard used whenever features are L2-normalized.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_feat: usize,
    pub trunk_blocks: usize,
    pub branch_a_blocks: usize,
    pub branch_m_blocks: usize,
    pub num_classes: usize,
    /// When false both branches share depth and mean pooling, start from
    /// identical weights, and only branch A forms the signature.
    pub asymmetric: bool,
    /// Logits are divided by this before the softmax.
    pub temperature: f64,
    /// Feed L2-normalized features to the classifiers instead of raw ones.
    pub normalize_classifier_input: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_in: 16,
            d_hidden: 32,
            d_feat: 16,
            trunk_blocks: 1,
            branch_a_blocks: 1,
            branch_m_blocks: 2,
            num_classes: 2,
            asymmetric: true,
            temperature: 1.0,
            normalize_classifier_input: false,
        }
    }
}

impl EncoderConfig {
    pub fn new(d_in: usize, num_classes: usize) -> Self {
        Self {
            d_in,
            num_classes,
            ..Self::default()
        }
    }

    /// Same depth and pooling in both branches (the mean-teacher baseline).
    pub fn symmetric(mut self) -> Self {
        self.asymmetric = false;
        self.branch_m_blocks = self.branch_a_blocks;
        self
    }

    pub fn pooling_a(&self) -> Pooling {
        Pooling::Mean
    }

    pub fn pooling_m(&self) -> Pooling {
        if self.asymmetric {
            Pooling::Max
        } else {
            Pooling::Mean
        }
    }

    pub fn signature_width(&self) -> usize {
        if self.asymmetric {
            2 * self.d_feat
        } else {
            self.d_feat
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_in", self.d_in),
            ("d_hidden", self.d_hidden),
            ("d_feat", self.d_feat),
            ("branch_a_blocks", self.branch_a_blocks),
            ("branch_m_blocks", self.branch_m_blocks),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(AbmtError::Parameter(format!("encoder {name} must be at least 1")));
        }
        if !self.asymmetric && self.branch_a_blocks != self.branch_m_blocks {
            return Err(AbmtError::Parameter(
                "symmetric encoder needs equal branch depths".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(AbmtError::Parameter("temperature must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form count of learnable scalars.
    pub fn param_count(&self) -> usize {
        let h = self.d_hidden;
        let block = 2 * (h * h + h);
        let stem = self.d_in * h + h;
        let proj = h * self.d_feat + self.d_feat;
        stem + self.trunk_blocks * block
            + (self.branch_a_blocks + self.branch_m_blocks) * block
            + 2 * proj
            + 2 * self.num_classes * self.d_feat
    }
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
}

fn layout(cfg: &EncoderConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut linear = |prefix: &str, dout: usize, din: usize| {
        specs.push(ParamSpec {
            name: format!("{prefix}.weight"),
            shape: vec![dout, din],
            fan_in: din,
        });
        specs.push(ParamSpec {
            name: format!("{prefix}.bias"),
            shape: vec![dout],
            fan_in: din,
        });
    };
    let h = cfg.d_hidden;
    linear("trunk.stem", h, cfg.d_in);
    for i in 0..cfg.trunk_blocks {
        linear(&format!("trunk.block{i}.fc1"), h, h);
        linear(&format!("trunk.block{i}.fc2"), h, h);
    }
    for (branch, blocks) in [("branch_a", cfg.branch_a_blocks), ("branch_m", cfg.branch_m_blocks)] {
        for i in 0..blocks {
            linear(&format!("{branch}.block{i}.fc1"), h, h);
            linear(&format!("{branch}.block{i}.fc2"), h, h);
        }
        linear(&format!("{branch}.proj"), cfg.d_feat, h);
    }
    for name in ["classifier_a", "classifier_m"] {
        specs.push(ParamSpec {
            name: name.to_string(),
            shape: vec![cfg.num_classes, cfg.d_feat],
            fan_in: cfg.d_feat,
        });
    }
    specs
}

/// Initial scale of classifier weights before dynamic initialization.
const CLASSIFIER_INIT_SCALE: f64 = 0.01;

/// All learnable parameters of one encoder instance.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    config: EncoderConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    rng_seed: u64,
}

/// Detached outputs of an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub f_a: Tensor,
    pub f_m: Tensor,
    pub p_a: Tensor,
    pub p_m: Tensor,
    /// Signature uses branch A only.
    pub single_branch_signature: bool,
}

/// Graph handles of a differentiable forward pass.
#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    pub f_a: Var,
    pub f_m: Var,
    pub p_a: Var,
    pub p_m: Var,
}

struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }
}

fn residual_block(g: &mut Graph, cur: &mut Cursor<'_>, x: Var) -> Result<Var> {
    let (w1, b1, w2, b2) = (cur.next(), cur.next(), cur.next(), cur.next());
    let h = g.linear(x, w1, Some(b1))?;
    let h = g.relu(h)?;
    let h = g.linear(h, w2, Some(b2))?;
    let s = g.add(x, h)?;
    g.relu(s)
}

impl EncoderState {
    /// Deterministic fan-in uniform initialization.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = layout(&config);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for spec in &specs {
            let n: usize = spec.shape.iter().product();
            let bound = if spec.name.starts_with("classifier") {
                CLASSIFIER_INIT_SCALE
            } else {
                1.0 / (spec.fan_in as f64).sqrt()
            };
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            names.push(spec.name.clone());
            params.push(Tensor::new(spec.shape.clone(), data)?.with_grad());
        }
        let mut state = Self {
            config,
            names,
            params,
            rng_seed: seed,
        };
        if !state.config.asymmetric {
            state.mirror_branch_a_into_m();
        }
        Ok(state)
    }

    fn mirror_branch_a_into_m(&mut self) {
        for i in 0..self.names.len() {
            if let Some(rest) = self.names[i].strip_prefix("branch_a.") {
                let target = format!("branch_m.{rest}");
                let j = self.names.iter().position(|n| *n == target).expect("symmetric layout");
                self.params[j] = self.params[i].clone();
            }
        }
        let (a, m) = self.classifier_indices();
        self.params[m] = self.params[a].clone();
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Indices of the two classifier matrices in [`Self::params`].
    pub fn classifier_indices(&self) -> (usize, usize) {
        let n = self.params.len();
        (n - 2, n - 1)
    }

    /// Rebuilds a state from named arrays (checkpoint loading).
    pub fn from_parts(config: EncoderConfig, seed: u64, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = layout(&config);
        if specs.len() != named.len() {
            return dim_err(format!("expected {} parameter arrays, got {}", specs.len(), named.len()));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (spec, (name, t)) in specs.iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return dim_err(format!(
                    "parameter {name} {:?} does not match layout entry {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                ));
            }
            names.push(name);
            params.push(t.with_grad());
        }
        Ok(Self {
            config,
            names,
            params,
            rng_seed: seed,
        })
    }

    /// Copy whose tensors never track gradients (teacher weights).
    pub fn detached(&self) -> Self {
        let mut out = self.clone();
        out.params.iter_mut().for_each(|p| p.set_requires_grad(false));
        out
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().filter(|p| p.requires_grad()).for_each(Tensor::zero_grad);
    }

    /// Records every parameter as a graph leaf, in layout order.
    pub fn register(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p)).collect()
    }

    fn check_batch(&self, shape: &[usize]) -> Result<(usize, usize)> {
        match shape {
            [n, p, d] if *d == self.config.d_in && *p > 0 => Ok((*n, *p)),
            s => dim_err(format!(
                "batch shape {s:?} does not match N x P x {}",
                self.config.d_in
            )),
        }
    }

    /// Differentiable forward pass. `params` must come from [`Self::register`]
    /// (or follow the same layout).
    pub fn forward_graph(&self, g: &mut Graph, params: &[Var], batch: Var) -> Result<OutputVars> {
        if params.len() != self.params.len() {
            return dim_err(format!("{} parameter handles for {} parameters", params.len(), self.params.len()));
        }
        let (n, parts) = self.check_batch(g.shape(batch))?;
        let cfg = &self.config;
        let mut cur = Cursor { vars: params, pos: 0 };

        let x = g.reshape(batch, vec![n * parts, cfg.d_in])?;
        let (w, b) = (cur.next(), cur.next());
        let x = g.linear(x, w, Some(b))?;
        let mut h = g.relu(x)?;
        for _ in 0..cfg.trunk_blocks {
            h = residual_block(g, &mut cur, h)?;
        }

        let branch = |g: &mut Graph, cur: &mut Cursor<'_>, blocks: usize, pooling: Pooling| -> Result<Var> {
            let mut z = h;
            for _ in 0..blocks {
                z = residual_block(g, cur, z)?;
            }
            let (w, b) = (cur.next(), cur.next());
            let z = g.linear(z, w, Some(b))?;
            let z = g.reshape(z, vec![n, parts, cfg.d_feat])?;
            g.pool(z, pooling)
        };
        let f_a = branch(g, &mut cur, cfg.branch_a_blocks, cfg.pooling_a())?;
        let f_m = branch(g, &mut cur, cfg.branch_m_blocks, cfg.pooling_m())?;

        let (ca, cm) = (cur.next(), cur.next());
        let head = |g: &mut Graph, f: Var, w: Var| -> Result<Var> {
            let input = if cfg.normalize_classifier_input {
                g.l2_normalize(f, NORM_EPS)?
            } else {
                f
            };
            let logits = g.linear(input, w, None)?;
            let logits = if cfg.temperature != 1.0 {
                g.scale(logits, 1.0 / cfg.temperature)?
            } else {
                logits
            };
            g.log_softmax(logits)
        };
        let p_a = head(g, f_a, ca)?;
        let p_m = head(g, f_m, cm)?;
        Ok(OutputVars { f_a, f_m, p_a, p_m })
    }

    /// Inference pass without gradient tracking.
    pub fn forward(&self, batch: &Tensor) -> Result<EncoderOutput> {
        let mut g = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|p| g.constant(p)).collect();
        let b = g.constant(batch);
        let out = self.forward_graph(&mut g, &params, b)?;
        Ok(self.collect(&g, &out))
    }

    /// Detached copy of the values behind `out`.
    pub fn collect(&self, g: &Graph, out: &OutputVars) -> EncoderOutput {
        EncoderOutput {
            f_a: g.to_tensor(out.f_a),
            f_m: g.to_tensor(out.f_m),
            p_a: g.to_tensor(out.p_a),
            p_m: g.to_tensor(out.p_m),
            single_branch_signature: !self.config.asymmetric,
        }
    }

    /// Forward in chunks of `chunk` samples and return the signatures.
    pub fn signatures(&self, samples: &Tensor, chunk: usize) -> Result<Tensor> {
        let (outputs, _) = self.forward_chunked(samples, chunk)?;
        Ok(outputs)
    }

    /// Chunked inference returning `(signatures, (f_a, f_m))`.
    pub fn forward_chunked(&self, samples: &Tensor, chunk: usize) -> Result<(Tensor, (Tensor, Tensor))> {
        let n = samples.rows();
        let chunk = chunk.max(1);
        let mut sig = Vec::new();
        let mut fa = Vec::new();
        let mut fm = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let out = self.forward(&samples.select_rows(&idx))?;
            sig.extend_from_slice(signature(&out).data());
            fa.extend_from_slice(out.f_a.data());
            fm.extend_from_slice(out.f_m.data());
            start = end;
        }
        let d = self.config.d_feat;
        Ok((
            Tensor::new(vec![n, self.config.signature_width()], sig)?,
            (Tensor::new(vec![n, d], fa)?, Tensor::new(vec![n, d], fm)?),
        ))
    }

    /// Replaces both classifiers with L2-normalized cluster means.
    pub fn init_dynamic_classifiers(&mut self, means_a: &Tensor, means_m: &Tensor) -> Result<()> {
        let d = self.config.d_feat;
        let k = means_a.rows();
        if means_a.shape() != [k, d] || means_m.shape() != [k, d] {
            return dim_err(format!(
                "cluster means {:?} / {:?}, expected [K, {d}]",
                means_a.shape(),
                means_m.shape()
            ));
        }
        if k < 2 {
            return Err(AbmtError::DegenerateClustering(format!("{k} cluster(s); need at least 2")));
        }
        for m in [means_a, means_m] {
            for i in 0..k {
                let norm = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-9 {
                    return contract_err(format!("cluster mean row {i} has norm {norm}"));
                }
            }
        }
        let (a, m) = self.classifier_indices();
        let track = self.params[a].requires_grad();
        let mut ca = means_a.clone();
        let mut cm = means_m.clone();
        ca.set_requires_grad(track);
        cm.set_requires_grad(track);
        self.params[a] = ca;
        self.params[m] = cm;
        self.config.num_classes = k;
        Ok(())
    }
}

/// Row-normalized branch features, concatenated (`[N x 2*d_feat]`), or
/// branch A alone for a symmetric encoder.
pub fn signature(out: &EncoderOutput) -> Tensor {
    let na = normalize_rows(&out.f_a);
    if out.single_branch_signature {
        return na;
    }
    let nm = normalize_rows(&out.f_m);
    let n = na.rows();
    let (da, dm) = (na.row_len(), nm.row_len());
    let mut data = Vec::with_capacity(n * (da + dm));
    for i in 0..n {
        data.extend_from_slice(na.row(i));
        data.extend_from_slice(nm.row(i));
    }
    Tensor::new(vec![n, da + dm], data).expect("finite")
}

/// Divides each row by `max(||row||, NORM_EPS)`.
pub fn normalize_rows(t: &Tensor) -> Tensor {
    let w = t.row_len().max(1);
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(w) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::new(t.shape().to_vec(), data).expect("finite")
}
