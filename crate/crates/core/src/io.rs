//! Checkpoint files: the encoder configuration plus every named parameter
//! array as JSON. Floats round-trip exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderState};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: EncoderConfig,
    seed: u64,
    params: Vec<NamedArray>,
}

pub fn checkpoint_to_json(state: &EncoderState) -> Result<String> {
    let ckpt = Checkpoint {
        config: state.config().clone(),
        seed: state.rng_seed(),
        params: state
            .names()
            .iter()
            .zip(state.params())
            .map(|(name, p)| NamedArray {
                name: name.clone(),
                shape: p.shape().to_vec(),
                data: p.data().to_vec(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&ckpt)?)
}

pub fn checkpoint_from_json(text: &str) -> Result<EncoderState> {
    let ckpt: Checkpoint = serde_json::from_str(text)?;
    let named = ckpt
        .params
        .into_iter()
        .map(|a| Ok((a.name, Tensor::new(a.shape, a.data)?)))
        .collect::<Result<Vec<_>>>()?;
    EncoderState::from_parts(ckpt.config, ckpt.seed, named)
}

pub fn save_checkpoint(state: &EncoderState, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_json(state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderState> {
    checkpoint_from_json(&std::fs::read_to_string(path)?)
}
