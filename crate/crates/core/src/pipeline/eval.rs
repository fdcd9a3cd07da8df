use serde::{Deserialize, Serialize};

use super::PipelineConfig;
use crate::error::{Error, Result};
use crate::hadamard::{fwht, HadamardPlan, Normalize};
use crate::model::{LanguageModel, ResidualTrace};
use crate::ssm::Profile;
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

/// SQNR in JSON: `null` stands for an exact match (infinite dB).
mod db {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub block: usize,
    pub mse: f64,
    #[serde(with = "db")]
    pub sqnr_db: f64,
}

/// Quantized-vs-float comparison on a token set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub n_tokens: usize,
    /// Logit MSE.
    pub mse: f64,
    #[serde(with = "db")]
    pub sqnr_db: f64,
    /// Residual stream after each block.
    pub per_block: Vec<BlockError>,
    pub argmax_agreement: f64,
    pub float_bytes: usize,
    pub quant_bytes: usize,
    pub size_ratio: f64,
    pub profiles: Vec<Profile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<PipelineConfig>,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    err: f64,
    sig: f64,
    n: usize,
}

impl Acc {
    fn add(&mut self, approx: &[f32], reference: &[f32]) {
        for (a, r) in approx.iter().zip(reference) {
            let e = *a as f64 - *r as f64;
            self.err += e * e;
            self.sig += (*r as f64) * (*r as f64);
        }
        self.n += reference.len();
    }

    fn mse(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.err / self.n as f64
        }
    }

    fn sqnr(&self) -> f64 {
        if self.err == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (self.sig / self.err).log10()
        }
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Compare `quant` against `float` on every sequence in `tokens`.
///
/// Residuals of a rotated model are rotated back before comparison.
pub fn evaluate(
    float: &dyn LanguageModel,
    quant: &dyn LanguageModel,
    tokens: &[Vec<u32>],
    float_bytes: usize,
    quant_bytes: usize,
    profiles: Vec<Profile>,
) -> Result<EvalReport> {
    if float.config() != quant.config() {
        return Err(Error::shape("float and quantized model configs differ"));
    }
    if tokens.is_empty() {
        return Err(Error::Pipeline("no evaluation tokens".into()));
    }
    let cfg = float.config();
    let unrotate = HadamardPlan::new(cfg.dims.d_model, Normalize::InvSqrt).ok();
    let fix = |h: &Tensor, rotated: bool| -> Result<Tensor> {
        match (rotated, &unrotate) {
            (false, _) => Ok(h.clone()),
            (true, Some(p)) => fwht(h, p),
            (true, None) => Err(Error::NotPowerOfTwo(cfg.dims.d_model)),
        }
    };
    let mut logits = Acc::default();
    let mut blocks = vec![Acc::default(); cfg.n_blocks];
    let (mut agree, mut n_tokens) = (0usize, 0usize);
    for seq in tokens {
        let mut tf = ResidualTrace::default();
        let mut tq = ResidualTrace::default();
        let lf = float.forward_with(seq, &mut tf, None)?;
        let lq = quant.forward_with(seq, &mut tq, None)?;
        logits.add(lq.data(), lf.data());
        for (i, (a, b)) in tq.residuals.iter().zip(&tf.residuals).enumerate() {
            let a = fix(a, quant.rotated())?;
            let b = fix(b, float.rotated())?;
            blocks[i].add(a.data(), b.data());
        }
        for t in 0..lf.n_rows() {
            agree += usize::from(argmax(lf.row(t)) == argmax(lq.row(t)));
        }
        n_tokens += lf.n_rows();
    }
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        n_tokens,
        mse: logits.mse(),
        sqnr_db: logits.sqnr(),
        per_block: blocks
            .iter()
            .enumerate()
            .map(|(i, a)| BlockError {
                block: i,
                mse: a.mse(),
                sqnr_db: a.sqnr(),
            })
            .collect(),
        argmax_agreement: agree as f64 / n_tokens as f64,
        float_bytes,
        quant_bytes,
        size_ratio: quant_bytes as f64 / float_bytes.max(1) as f64,
        profiles,
        config: None,
    })
}
