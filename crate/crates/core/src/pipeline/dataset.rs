use std::fmt::Write as _;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, AbmtError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl FromStr for Split {
    type Err = AbmtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(AbmtError::Parameter(format!("unknown split tag {other:?}"))),
        }
    }
}

/// Part-feature samples (`N x P x d_in`) with identity, camera and split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Tensor,
    ids: Vec<i64>,
    cams: Vec<i64>,
    splits: Vec<Split>,
    n_cams: usize,
}

/// Samples of one split plus their labels and positions in the full set.
#[derive(Clone, Debug, PartialEq)]
pub struct Subset {
    pub samples: Tensor,
    pub ids: Vec<i64>,
    pub cams: Vec<i64>,
    pub indices: Vec<usize>,
}

impl Dataset {
    pub fn new(samples: Tensor, ids: Vec<i64>, cams: Vec<i64>, splits: Vec<Split>, n_cams: usize) -> Result<Self> {
        if samples.shape().len() != 3 {
            return dim_err(format!("samples must be N x P x d_in, got {:?}", samples.shape()));
        }
        let n = samples.rows();
        if ids.len() != n || cams.len() != n || splits.len() != n {
            return dim_err("per-sample arrays do not match the sample count");
        }
        if cams.iter().any(|&c| c < 0 || c as usize >= n_cams) {
            return Err(AbmtError::Parameter(format!("camera ids must lie in [0, {n_cams})")));
        }
        let ds = Self {
            samples,
            ids,
            cams,
            splits,
            n_cams,
        };
        let gallery: std::collections::BTreeSet<i64> = ds.subset(Split::Gallery).ids.into_iter().collect();
        if ds.subset(Split::Query).ids.iter().any(|id| !gallery.contains(id)) {
            return Err(AbmtError::Parameter("query identity missing from the gallery".into()));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn parts(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn d_in(&self) -> usize {
        self.samples.shape()[2]
    }

    pub fn n_cams(&self) -> usize {
        self.n_cams
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn ids(&self) -> &[i64] {
        &self.ids
    }

    pub fn cams(&self) -> &[i64] {
        &self.cams
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn subset(&self, split: Split) -> Subset {
        let indices: Vec<usize> = (0..self.len()).filter(|&i| self.splits[i] == split).collect();
        Subset {
            samples: self.samples.select_rows(&indices),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            cams: indices.iter().map(|&i| self.cams[i]).collect(),
            indices,
        }
    }

    /// Text form: a header `n P d_in n_cams`, then per sample
    /// `identity camera split v_1 .. v_{P*d_in}`.
    pub fn to_text(&self) -> String {
        let (p, d) = (self.parts(), self.d_in());
        let mut s = format!("{} {p} {d} {}\n", self.len(), self.n_cams);
        for i in 0..self.len() {
            let _ = write!(s, "{} {} {}", self.ids[i], self.cams[i], self.splits[i].tag());
            for v in self.samples.row(i) {
                let _ = write!(s, " {v:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let parse_err = |line: usize, msg: String| AbmtError::Parse { line: line + 1, msg };
        let (hline, header) = lines.next().ok_or_else(|| parse_err(0, "missing header".into()))?;
        let head: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| parse_err(hline, format!("header field {t:?}: {e}"))))
            .collect::<Result<_>>()?;
        let [n, p, d, n_cams] = head[..] else {
            return Err(parse_err(hline, "header must be `n P d_in n_cams`".into()));
        };
        let mut data = Vec::with_capacity(n * p * d);
        let (mut ids, mut cams, mut splits) = (Vec::new(), Vec::new(), Vec::new());
        for (ln, line) in lines {
            let mut tok = line.split_whitespace();
            let mut field = |name: &str| tok.next().ok_or_else(|| parse_err(ln, format!("missing {name}")));
            let id = field("identity")?;
            let cam = field("camera")?;
            let split = field("split")?;
            ids.push(id.parse::<i64>().map_err(|e| parse_err(ln, format!("identity: {e}")))?);
            cams.push(cam.parse::<i64>().map_err(|e| parse_err(ln, format!("camera: {e}")))?);
            splits.push(split.parse::<Split>().map_err(|e| parse_err(ln, e.to_string()))?);
            let before = data.len();
            for t in tok {
                data.push(t.parse::<f64>().map_err(|e| parse_err(ln, format!("value {t:?}: {e}")))?);
            }
            if data.len() - before != p * d {
                return Err(parse_err(ln, format!("expected {} values, got {}", p * d, data.len() - before)));
            }
        }
        if ids.len() != n {
            return Err(parse_err(hline, format!("header announces {n} samples, found {}", ids.len())));
        }
        Dataset::new(Tensor::new(vec![n, p, d], data)?, ids, cams, splits, n_cams)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_ids: usize,
    pub imgs_per_id: usize,
    pub n_cams: usize,
    pub parts: usize,
    pub d_in: usize,
    pub domain_shift: f64,
    pub noise: f64,
    /// Spread of identity base vectors.
    pub id_scale: f64,
    /// Spread of the per-identity, per-part offsets.
    pub part_scale: f64,
    /// Spread of the per-camera bias.
    pub cam_scale: f64,
    /// Rank of a noise subspace shared by both domains, added on top of the
    /// isotropic noise.
    pub clutter_dim: usize,
    /// Spread of the shared-subspace noise as a multiple of `noise`.
    pub clutter_gain: f64,
    /// Target images per identity placed in the query and gallery splits.
    pub query_per_id: usize,
    pub gallery_per_id: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_ids: 20,
            imgs_per_id: 16,
            n_cams: 4,
            parts: 4,
            d_in: 8,
            domain_shift: 0.3,
            noise: 0.5,
            id_scale: 1.0,
            part_scale: 0.5,
            cam_scale: 0.5,
            clutter_dim: 1,
            clutter_gain: 5.5,
            query_per_id: 2,
            gallery_per_id: 4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AbmtError::Parameter(m));
        if self.n_ids < 4 || self.imgs_per_id < 4 || self.n_cams < 2 {
            return bad("synthetic data needs n_ids >= 4, imgs_per_id >= 4, n_cams >= 2".into());
        }
        if self.parts == 0 || self.d_in == 0 {
            return bad("parts and d_in must be positive".into());
        }
        if self.query_per_id == 0 || self.gallery_per_id == 0 || self.query_per_id + self.gallery_per_id >= self.imgs_per_id {
            return bad(format!(
                "{} query + {} gallery images leave no training images out of {}",
                self.query_per_id, self.gallery_per_id, self.imgs_per_id
            ));
        }
        for (name, v) in [
            ("domain_shift", self.domain_shift),
            ("noise", self.noise),
            ("id_scale", self.id_scale),
            ("part_scale", self.part_scale),
            ("cam_scale", self.cam_scale),
            ("clutter_gain", self.clutter_gain),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

struct Domain {
    base: Vec<Vec<f64>>,
    offsets: Vec<Vec<Vec<f64>>>,
    cam_bias: Vec<Vec<f64>>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect()
}

fn embed(map: &[f64], code: &[f64]) -> Vec<f64> {
    map.chunks(code.len())
        .map(|row| row.iter().zip(code).map(|(a, z)| a * z).sum())
        .collect()
}

impl Domain {
    fn draw(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_in;
        Self {
            base: (0..cfg.n_ids).map(|_| gaussian_vec(rng, d, cfg.id_scale)).collect(),
            offsets: (0..cfg.n_ids)
                .map(|_| (0..cfg.parts).map(|_| gaussian_vec(rng, d, cfg.part_scale)).collect())
                .collect(),
            cam_bias: (0..cfg.n_cams).map(|_| gaussian_vec(rng, d, cfg.cam_scale)).collect(),
        }
    }

    fn image(&self, cfg: &SynthConfig, clutter: &[f64], id: usize, cam: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(cfg.parts * cfg.d_in);
        for p in 0..cfg.parts {
            let shared = match cfg.clutter_dim {
                0 => vec![0.0; cfg.d_in],
                c => embed(clutter, &gaussian_vec(rng, c, cfg.noise * cfg.clutter_gain)),
            };
            for k in 0..cfg.d_in {
                let eps: f64 = StandardNormal.sample(rng);
                out.push(self.base[id][k] + self.offsets[id][p][k] + self.cam_bias[cam][k] + cfg.noise * eps + shared[k]);
            }
        }
        out
    }
}

/// Camera of image `j` of identity `i`: every identity is seen by all
/// cameras in rotation.
fn camera_of(i: usize, j: usize, n_cams: usize) -> usize {
    (i + j) % n_cams
}

/// Labeled source domain (all `train`) and a target domain drawn from fresh
/// identities, passed through a fixed affine map `x -> (I + s*G) x + s*t`.
/// The first `query_per_id` target images of each identity form the query
/// split, the next `gallery_per_id` the gallery, and the rest train.
pub fn synth_dataset(cfg: &SynthConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_in;
    let clutter = gaussian_vec(&mut rng, d * cfg.clutter_dim, 1.0 / (cfg.clutter_dim.max(1) as f64).sqrt());
    let source_domain = Domain::draw(cfg, &mut rng);
    let target_domain = Domain::draw(cfg, &mut rng);
    let g: Vec<f64> = gaussian_vec(&mut rng, d * d, 1.0 / (d as f64).sqrt());
    let t: Vec<f64> = gaussian_vec(&mut rng, d, 1.0);
    let s = cfg.domain_shift;
    let shift = |v: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|r| v[r] + s * ((0..d).map(|c| g[r * d + c] * v[c]).sum::<f64>() + t[r]))
            .collect()
    };

    let n = cfg.n_ids * cfg.imgs_per_id;
    let mut build = |domain: &Domain, target: bool, id_offset: i64| -> Result<Dataset> {
        let mut data = Vec::with_capacity(n * cfg.parts * d);
        let (mut ids, mut cams, mut splits) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..cfg.n_ids {
            for j in 0..cfg.imgs_per_id {
                let cam = camera_of(i, j, cfg.n_cams);
                let img = domain.image(cfg, &clutter, i, cam, &mut rng);
                if target {
                    for part in img.chunks(d) {
                        data.extend(shift(part));
                    }
                } else {
                    data.extend(img);
                }
                ids.push(id_offset + i as i64);
                cams.push(cam as i64);
                splits.push(match j {
                    _ if !target => Split::Train,
                    j if j < cfg.query_per_id => Split::Query,
                    j if j < cfg.query_per_id + cfg.gallery_per_id => Split::Gallery,
                    _ => Split::Train,
                });
            }
        }
        Dataset::new(Tensor::new(vec![n, cfg.parts, d], data)?, ids, cams, splits, cfg.n_cams)
    };
    let source = build(&source_domain, false, 0)?;
    let target = build(&target_domain, true, cfg.n_ids as i64)?;
    Ok((source, target))
}
