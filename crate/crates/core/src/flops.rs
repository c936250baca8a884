//! Closed-form FLOP accounting for the head update of each algorithm and
//! for extractor forward passes. Multiply and add count as separate FLOPs.

use std::fmt::Write as _;

use thiserror::Error;

use crate::bnn::{BnnError, BnnModel, Layer, Shape};
use crate::cl::Algorithm;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FlopError {
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("need 1 <= M <= N, got M={m}, N={n}")]
    ClassCounts { m: u64, n: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopQuery {
    pub method: Algorithm,
    /// Classes the extractor was pre-trained on.
    pub m: u64,
    /// Total classes after expansion.
    pub n: u64,
    pub batch_size: u64,
}

/// Rounds `whole + num/den` to the nearest integer, ties toward zero.
fn round_fraction(whole: u64, num: u64, den: u64) -> u64 {
    let (q, r) = (num / den, num % den);
    whole + q + u64::from(2 * r > den)
}

/// Per-sample backpropagation FLOPs. Batch terms are amortized over the batch
/// and evaluated exactly before rounding.
pub fn backprop_flops(q: FlopQuery) -> Result<u64, FlopError> {
    let FlopQuery { method, m, n, batch_size: b } = q;
    if b == 0 {
        return Err(FlopError::ZeroBatch);
    }
    if m == 0 || n < m {
        return Err(FlopError::ClassCounts { m, n });
    }
    let mn = m * n;
    let (whole, amortized) = match method {
        Algorithm::TinyOl => (2 * mn + m + 3 * n, 0),
        Algorithm::TinyOlBatches => (2 * n + 2 * mn, 3 * mn + 3 * n + 4),
        Algorithm::TinyOlV2 => (2 * mn + 2 * m + 3 * n, 0),
        Algorithm::TinyOlV2Batches => (2 * mn + m + 2 * n, m * m + m + 4 + 3 * mn + 3 * n),
        Algorithm::Lwf => (3 * mn + m + 7 * n + 1, 0),
        Algorithm::LwfBatches => (3 * mn + m + 7 * n + 1, mn + n),
        Algorithm::Cwr => (2 * mn + 3 * n + m, 5 * mn + 10 * n),
    };
    Ok(round_fraction(whole, amortized, b))
}

/// FLOPs for rows = algorithms, columns = `M+1 ..= M+4` total classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopTable {
    pub m: u64,
    pub batch_size: u64,
    pub rows: Vec<(Algorithm, [u64; 4])>,
}

pub fn flop_table(m: u64, batch_size: u64) -> Result<FlopTable, FlopError> {
    let rows = Algorithm::ALL
        .into_iter()
        .map(|method| {
            let mut cells = [0; 4];
            for (k, cell) in cells.iter_mut().enumerate() {
                *cell = backprop_flops(FlopQuery {
                    method,
                    m,
                    n: m + k as u64 + 1,
                    batch_size,
                })?;
            }
            Ok((method, cells))
        })
        .collect::<Result<_, FlopError>>()?;
    Ok(FlopTable { m, batch_size, rows })
}

impl FlopTable {
    pub fn get(&self, method: Algorithm, new_classes: usize) -> Option<u64> {
        let (_, cells) = self.rows.iter().find(|(a, _)| *a == method)?;
        cells.get(new_classes.checked_sub(1)?).copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,1,2,3,4\n");
        for (a, cells) in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", a, cells[0], cells[1], cells[2], cells[3]);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|(a, _)| a.name().len()).max().unwrap_or(6).max(6);
        let mut out = format!(
            "backprop FLOPs per sample (M={}, batch_size={})\n{:<width$}  {:>6} {:>6} {:>6} {:>6}\n",
            self.m, self.batch_size, "method", "+1", "+2", "+3", "+4"
        );
        for (a, c) in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>6} {:>6} {:>6} {:>6}",
                a.name(),
                c[0],
                c[1],
                c[2],
                c[3]
            );
        }
        out
    }
}

/// Nominal forward-pass FLOPs for an input of the given shape. Binarized
/// convolutions are counted at the same rate as full-precision ones.
pub fn forward_flops(model: &BnnModel, input: Shape) -> Result<u64, BnnError> {
    layer_flops(model.layers(), input)
}

/// Same count over a bare layer list, which need not end in pooling.
pub fn layer_flops(layers: &[Layer], input: Shape) -> Result<u64, BnnError> {
    let mut total = 0u64;
    let mut current = input;
    for layer in layers {
        let out = layer.output_shape(current)?;
        total += match layer {
            Layer::ConvFp(c) => conv_flops(&c.geometry, out),
            Layer::ConvBin(c) => conv_flops(&c.geometry, out),
            Layer::BatchNorm(_) => 2 * current.len() as u64,
            Layer::Relu { .. } => current.len() as u64,
            Layer::GlobalAvgPool { channels } => (current.len() + channels) as u64,
        };
        current = out;
    }
    Ok(total)
}

fn conv_flops(g: &crate::bnn::ConvGeometry, out: Shape) -> u64 {
    2 * (g.kernel_h * g.kernel_w * g.in_channels * g.out_channels * out.height * out.width) as u64
}
