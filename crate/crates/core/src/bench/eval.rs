//! Greedy decoding and exact-match accuracy.

use rayon::prelude::*;

use crate::bench::tasks::Sample;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{encode_prompt, Model, ModelConfig, EOS};
use crate::tensor::argmax;

/// Greedy continuation of `prompt`, stopping at EOS (not included) or after
/// `max_new` tokens. Ties between logits go to the lowest token id.
pub fn greedy_decode(model: &Model<'_>, prompt: &str, max_new: usize) -> Result<Vec<u32>> {
    let cfg = model.config();
    let mut tokens = encode_prompt(prompt, cfg)?;
    let mut out = Vec::new();
    while out.len() < max_new && tokens.len() < cfg.max_seq_len {
        let f = model.forward(&tokens)?;
        let next = argmax(f.logits.row(tokens.len() - 1)) as u32;
        if next == EOS {
            break;
        }
        out.push(next);
        tokens.push(next);
    }
    Ok(out)
}

/// Byte tokens as text; special tokens are dropped.
pub fn decode_bytes(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Whether the greedy answer equals `sample.output` exactly.
pub fn is_correct(model: &Model<'_>, sample: &Sample) -> Result<bool> {
    // one extra step is enough to see whether EOS follows the reference
    let generated = greedy_decode(model, &sample.instruction, sample.output.len() + 1)?;
    Ok(generated.len() == sample.output.len() && generated.iter().all(|&t| t < 256) && decode_bytes(&generated) == sample.output)
}

/// Fraction of `samples` answered exactly.
pub fn evaluate(ckpt: &Checkpoint, cfg: &ModelConfig, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty split".into()));
    }
    let model = Model::new(ckpt, cfg)?;
    let hits = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            is_correct(&model, s).map_err(|e| Error::Sample {
                index: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / samples.len() as f64)
}
