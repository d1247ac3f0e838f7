use std::sync::Arc;

use super::ActiveSet;
use crate::autograd::conv2d_output_size;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RulebookMode {
    /// Output sites are exactly the input sites; kernel centred on each.
    Submanifold,
    /// Ordinary strided correlation evaluated only at externally chosen output sites.
    Strided { stride: usize, padding: usize },
}

/// Per-offset `(input_index, output_index)` pairs for one sparse convolution.
///
/// Offsets are numbered `ki * kw + kj`; within an offset, pairs are ordered by
/// output index, so building is deterministic.
#[derive(Clone, Debug)]
pub struct Rulebook {
    kernel: (usize, usize),
    mode: RulebookMode,
    input: Arc<ActiveSet>,
    output: Arc<ActiveSet>,
    pairs: Vec<Vec<(u32, u32)>>,
}

impl Rulebook {
    pub fn kernel(&self) -> (usize, usize) {
        self.kernel
    }

    pub fn mode(&self) -> RulebookMode {
        self.mode
    }

    pub fn input(&self) -> &Arc<ActiveSet> {
        &self.input
    }

    pub fn output(&self) -> &Arc<ActiveSet> {
        &self.output
    }

    pub fn pairs(&self, offset: usize) -> &[(u32, u32)] {
        &self.pairs[offset]
    }

    pub fn offsets(&self) -> usize {
        self.pairs.len()
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }

    /// Top-left input position read by `offset` when the output site sits at `(row, col)`.
    pub fn source_position(&self, offset: usize, row: usize, col: usize) -> (isize, isize) {
        let (kh, kw) = self.kernel;
        let (ki, kj) = (offset / kw, offset % kw);
        match self.mode {
            RulebookMode::Submanifold => (
                row as isize + ki as isize - (kh / 2) as isize,
                col as isize + kj as isize - (kw / 2) as isize,
            ),
            RulebookMode::Strided { stride, padding } => (
                (row * stride + ki) as isize - padding as isize,
                (col * stride + kj) as isize - padding as isize,
            ),
        }
    }
}

/// Submanifold rulebook: for every active `p` and offset `o`, a pair exists
/// iff `q = p + o - center` is also active.
pub fn build_rulebook(active: &Arc<ActiveSet>, kernel: (usize, usize)) -> Result<Rulebook> {
    let (kh, kw) = kernel;
    if kh == 0 || kw == 0 || kh % 2 == 0 || kw % 2 == 0 {
        return Err(invalid(format!(
            "submanifold convolution needs an odd kernel, got {}x{}",
            kh, kw
        )));
    }
    let mut rb = Rulebook {
        kernel,
        mode: RulebookMode::Submanifold,
        input: active.clone(),
        output: active.clone(),
        pairs: vec![Vec::new(); kh * kw],
    };
    fill_pairs(&mut rb);
    Ok(rb)
}

/// Strided rulebook from `input` sites onto the caller-chosen `output` sites.
/// Every output site must see at least one active input.
pub fn build_strided_rulebook(
    input: &Arc<ActiveSet>,
    output: &Arc<ActiveSet>,
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
) -> Result<Rulebook> {
    let (kh, kw) = kernel;
    if kh == 0 || kw == 0 || stride == 0 {
        return Err(invalid("strided rulebook needs a non-empty kernel and positive stride"));
    }
    let oh = conv2d_output_size(input.height(), kh, stride, padding);
    let ow = conv2d_output_size(input.width(), kw, stride, padding);
    if oh != Some(output.height()) || ow != Some(output.width()) || input.batch() != output.batch() {
        return Err(Error::Sparse(format!(
            "output grid {}x{}x{} does not match a {}x{} stride-{} conv of the {}x{}x{} input grid",
            output.batch(),
            output.height(),
            output.width(),
            kh,
            kw,
            stride,
            input.batch(),
            input.height(),
            input.width()
        )));
    }
    let mut rb = Rulebook {
        kernel,
        mode: RulebookMode::Strided { stride, padding },
        input: input.clone(),
        output: output.clone(),
        pairs: vec![Vec::new(); kh * kw],
    };
    let hits = fill_pairs(&mut rb);
    if let Some(pos) = hits.iter().position(|&h| h == 0) {
        return Err(Error::Sparse(format!(
            "target site {:?} has an empty receptive field (mask and stride misaligned)",
            output.coords()[pos]
        )));
    }
    Ok(rb)
}

/// Returns the number of pairs found per output site.
fn fill_pairs(rb: &mut Rulebook) -> Vec<u32> {
    let (kh, kw) = rb.kernel;
    let mut hits = vec![0u32; rb.output.len()];
    for (out_idx, c) in rb.output.coords().iter().enumerate() {
        for offset in 0..kh * kw {
            let (r, col) = rb.source_position(offset, c.row as usize, c.col as usize);
            if let Some(in_idx) = rb.input.lookup(c.batch as usize, r, col) {
                rb.pairs[offset].push((in_idx as u32, out_idx as u32));
                hits[out_idx] += 1;
            }
        }
    }
    hits
}
