//! Communication accounting, the per-round metrics stream, and the binary
//! payload format.
//!
//! The unit of account is one transmitted scalar. Payloads serialize as
//! 32-bit reals, so bytes on the wire are `4 * scalars` plus a fixed header.

use std::io::{self, BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::SyntheticDataset;
use crate::models::SoftBatch;
use crate::tensor::Tensor;

pub const BYTES_PER_SCALAR: u64 = 4;
pub const PAYLOAD_MAGIC: &[u8; 5] = b"TOFU1";

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("metrics i/o: {0}")]
    Io(#[from] io::Error),
    #[error("metrics line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("bad payload: {0}")]
    Payload(String),
}

/// Dimensions that determine a synthetic payload's size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayloadSpec {
    pub nimgs: usize,
    pub input_dim: usize,
    pub class_count: usize,
    pub layer_count: usize,
    pub param_count: usize,
}

/// Inputs, label logits and one spanning ratio per datapoint, plus one
/// scaling ratio per layer and the final reconstruction loss.
pub fn tofu_payload_scalars(p: &PayloadSpec) -> u64 {
    (p.nimgs * (p.input_dim + p.class_count + 1) + p.layer_count + 1) as u64
}

/// A raw update is every parameter.
pub fn fedavg_payload_scalars(p: &PayloadSpec) -> u64 {
    p.param_count as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Tofu,
    Fedavg,
    SingleDevice,
}

/// One line of the metrics file. Field order is the serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub phase: u8,
    pub mode: Mode,
    pub accuracy: f64,
    pub mean_r_loss: f64,
    pub up_scalars: u64,
    pub down_scalars: u64,
    pub cumulative_scalars: u64,
}

/// Running totals for one experiment.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    cumulative: u64,
    records: Vec<RoundRecord>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cumulative_scalars(&self) -> u64 {
        self.cumulative
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    /// Closes a round, stamping `cumulative_scalars`.
    pub fn close_round(
        &mut self,
        round: usize,
        phase: u8,
        mode: Mode,
        accuracy: f64,
        mean_r_loss: f64,
        up_scalars: u64,
        down_scalars: u64,
    ) -> RoundRecord {
        self.cumulative += up_scalars + down_scalars;
        let rec = RoundRecord {
            round,
            phase,
            mode,
            accuracy,
            mean_r_loss,
            up_scalars,
            down_scalars,
            cumulative_scalars: self.cumulative,
        };
        self.records.push(rec.clone());
        rec
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Efficiency {
    Ratio(f64),
    /// At least one run never reached the target accuracy.
    Unreached {
        baseline_reached: bool,
        candidate_reached: bool,
    },
}

impl Efficiency {
    pub fn ratio(self) -> Option<f64> {
        match self {
            Efficiency::Ratio(r) => Some(r),
            Efficiency::Unreached { .. } => None,
        }
    }
}

/// Cumulative scalars at the first round with `accuracy >= target_acc`.
pub fn scalars_to_reach(records: &[RoundRecord], target_acc: f64) -> Option<u64> {
    records
        .iter()
        .find(|r| r.accuracy >= target_acc)
        .map(|r| r.cumulative_scalars)
}

/// Iso-accuracy efficiency: baseline scalars over candidate scalars, each
/// taken at the first round reaching `target_acc`.
pub fn efficiency_ratio(baseline: &[RoundRecord], candidate: &[RoundRecord], target_acc: f64) -> Efficiency {
    match (
        scalars_to_reach(baseline, target_acc),
        scalars_to_reach(candidate, target_acc),
    ) {
        (Some(b), Some(c)) if c > 0 => Efficiency::Ratio(b as f64 / c as f64),
        (b, c) => Efficiency::Unreached {
            baseline_reached: b.is_some(),
            candidate_reached: c.is_some_and(|c| c > 0),
        },
    }
}

/// Line-delimited JSON writer, flushed after every record.
pub struct MetricsSink<W: Write> {
    out: W,
}

impl<W: Write> MetricsSink<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn emit<T: Serialize>(&mut self, record: &T) -> Result<(), LedgerError> {
        serde_json::to_writer(&mut self.out, record).map_err(io::Error::from)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Reads a metrics file back into records.
pub fn replay(input: impl BufRead) -> Result<Vec<RoundRecord>, LedgerError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| LedgerError::Parse { line: i + 1, source })?,
        );
    }
    Ok(out)
}

/// Writes `ds` as `TOFU1`, then `N, D, C, L` as little-endian `u32`, then
/// inputs, label logits, spanning-ratio logits, scaling ratios and the final
/// reconstruction loss as little-endian `f32`.
pub fn write_payload(ds: &SyntheticDataset, mut out: impl Write) -> Result<(), LedgerError> {
    let n = ds.nimgs();
    let d = ds.batch.inputs.rows_cols().1;
    let c = ds.batch.label_logits.rows_cols().1;
    let l = ds.gamma.len();
    out.write_all(PAYLOAD_MAGIC)?;
    for dim in [n, d, c, l] {
        let dim = u32::try_from(dim).map_err(|_| LedgerError::Payload(format!("dimension {dim} exceeds u32")))?;
        out.write_all(&dim.to_le_bytes())?;
    }
    let reals = ds
        .batch
        .inputs
        .data()
        .iter()
        .chain(ds.batch.label_logits.data())
        .chain(ds.batch.alpha_logits.data())
        .chain(&ds.gamma)
        .chain(std::iter::once(&ds.final_r_loss));
    for &v in reals {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_payload(mut input: impl Read) -> Result<SyntheticDataset, LedgerError> {
    let mut magic = [0u8; 5];
    input.read_exact(&mut magic)?;
    if &magic != PAYLOAD_MAGIC {
        return Err(LedgerError::Payload(format!("bad magic {magic:?}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let [n, d, c, l] = dims;
    let mut read_reals = |count: usize| -> Result<Vec<f64>, LedgerError> {
        let mut buf = vec![0u8; count * 4];
        input.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect())
    };
    let bad = |e: crate::tensor::TensorError| LedgerError::Payload(e.to_string());
    let inputs = Tensor::new(vec![n, d], read_reals(n * d)?).map_err(bad)?;
    let label_logits = Tensor::new(vec![n, c], read_reals(n * c)?).map_err(bad)?;
    let alpha_logits = Tensor::vector(read_reals(n)?);
    let gamma = read_reals(l)?;
    let final_r_loss = read_reals(1)?[0];
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(LedgerError::Payload(format!("{} trailing bytes", rest.len())));
    }
    Ok(SyntheticDataset {
        batch: SoftBatch {
            inputs,
            label_logits,
            alpha_logits,
        },
        gamma,
        final_r_loss,
    })
}
