use crate::corpus::special::PAD;
use crate::denoising::DenoisedExample;
use crate::error::{bail, Result};

/// Equally shaped examples stacked row-major for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub enc_len: usize,
    pub dec_len: usize,
    pub enc_ids: Vec<usize>,
    pub dec_input: Vec<usize>,
    pub dec_target: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl Batch {
    /// Pads every example to the longest non-PAD prefix in the batch, so
    /// trailing padding shared by all rows is never computed.
    pub fn from_examples(examples: &[DenoisedExample]) -> Result<Self> {
        if examples.is_empty() {
            bail!(Contract, "empty batch");
        }
        let live = |ids: &[u32]| ids.len() - ids.iter().rev().take_while(|&&t| t == PAD).count();
        let enc_len = examples.iter().map(|e| live(&e.enc_ids)).max().unwrap().max(1);
        let dec_len = examples
            .iter()
            .map(|e| e.loss_mask.len() - e.loss_mask.iter().rev().take_while(|&&m| !m).count())
            .max()
            .unwrap()
            .max(1);
        let size = examples.len();
        let mut b = Batch {
            size,
            enc_len,
            dec_len,
            enc_ids: vec![PAD as usize; size * enc_len],
            dec_input: vec![PAD as usize; size * dec_len],
            dec_target: vec![PAD as usize; size * dec_len],
            loss_mask: vec![false; size * dec_len],
        };
        for (r, e) in examples.iter().enumerate() {
            if e.dec_input_ids.len() != e.dec_target_ids.len() || e.loss_mask.len() != e.dec_target_ids.len() {
                bail!(Contract, "decoder input, target and mask lengths differ");
            }
            for (j, &t) in e.enc_ids.iter().take(enc_len).enumerate() {
                b.enc_ids[r * enc_len + j] = t as usize;
            }
            for j in 0..e.dec_target_ids.len().min(dec_len) {
                b.dec_input[r * dec_len + j] = e.dec_input_ids[j] as usize;
                b.dec_target[r * dec_len + j] = e.dec_target_ids[j] as usize;
                b.loss_mask[r * dec_len + j] = e.loss_mask[j];
            }
        }
        Ok(b)
    }

    /// A single unpadded example.
    pub fn single(enc_ids: &[u32], dec_input: &[u32]) -> Result<Self> {
        if enc_ids.is_empty() || dec_input.is_empty() {
            bail!(Input, "encoder and decoder inputs must be nonempty");
        }
        Ok(Batch {
            size: 1,
            enc_len: enc_ids.len(),
            dec_len: dec_input.len(),
            enc_ids: enc_ids.iter().map(|&t| t as usize).collect(),
            dec_input: dec_input.iter().map(|&t| t as usize).collect(),
            dec_target: vec![PAD as usize; dec_input.len()],
            loss_mask: vec![false; dec_input.len()],
        })
    }

    /// Source tokens processed, counting both sides including padding.
    pub fn positions(&self) -> usize {
        self.size * (self.enc_len + self.dec_len)
    }

    pub fn has_loss(&self) -> bool {
        self.loss_mask.iter().any(|&m| m)
    }
}
