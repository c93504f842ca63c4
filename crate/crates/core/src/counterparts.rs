//! Interchangeable pooling heads for the second-order branch.
//!
//! Every head maps `M x d` token features to a `1 x d̃` vector whatever `M`
//! is: a statistic of fixed width followed by the same layer-norm and
//! two-layer feed-forward block used by MBDC, each head with its own weights.
//! Besides MBDC, the available statistics are the token mean, single-head
//! BDC and the upper triangle of the sample covariance.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bdc::{canonical_row_order, DEFAULT_BDC_EPS};
use crate::error::{Error, Result};
use crate::mbdc::{concat_width, ln_ffn, MbdcParams, MbdcVars};
use crate::numcore::{read_blob, triu_len, write_blob, NodeId, Tape, Tensor};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PoolingHeadKind {
    #[serde(rename = "mean")]
    FirstOrderMean,
    #[default]
    #[serde(rename = "mbdc")]
    Mbdc,
    #[serde(rename = "bdc")]
    SingleHeadBdc,
    #[serde(rename = "cov")]
    CovarianceTriu,
}

impl PoolingHeadKind {
    pub const ALL: [PoolingHeadKind; 4] = [
        PoolingHeadKind::FirstOrderMean,
        PoolingHeadKind::Mbdc,
        PoolingHeadKind::SingleHeadBdc,
        PoolingHeadKind::CovarianceTriu,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PoolingHeadKind::FirstOrderMean => "mean",
            PoolingHeadKind::Mbdc => "mbdc",
            PoolingHeadKind::SingleHeadBdc => "bdc",
            PoolingHeadKind::CovarianceTriu => "cov",
        }
    }

    /// Smallest token count the head accepts.
    pub fn min_tokens(self) -> usize {
        match self {
            PoolingHeadKind::CovarianceTriu => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for PoolingHeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolingHeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown pooling head {s:?}, expected mbdc, bdc, cov or mean")))
    }
}

/// Centered sample covariance `(x - x̄)ᵀ(x - x̄) / (M - 1)` on the tape.
pub fn covariance_node(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let (m, _) = tape.shape(x);
    if m < 2 {
        return Err(Error::DegenerateSample(format!("covariance needs M >= 2 tokens, got {m}")));
    }
    let x = canonical_row_order(tape, x)?;
    let mean = tape.mean_rows(x)?;
    let ones = tape.constant(Tensor::ones(m, 1));
    let spread = tape.matmul(ones, mean)?;
    let centered = tape.sub(x, spread)?;
    let ct = tape.transpose(centered)?;
    let scatter = tape.matmul(ct, centered)?;
    tape.scale(scatter, 1.0 / (m - 1) as f64)
}

/// Upper triangle (with diagonal) of the sample covariance, before projection.
pub fn covariance_triu(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let cov = covariance_node(&mut tape, xn)?;
    let v = tape.triu_vec(cov)?;
    Ok(tape.value(v).clone())
}

/// A pooling head and its projection weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingParams {
    pub kind: PoolingHeadKind,
    /// Channel groups; only meaningful for [`PoolingHeadKind::Mbdc`].
    pub heads: usize,
    pub d: usize,
    pub d_tilde: usize,
    pub hidden: usize,
    pub w1: Tensor,
    pub w2: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub eps: f64,
}

/// Width of the statistic fed to the layer norm.
pub fn statistic_width(kind: PoolingHeadKind, heads: usize, d: usize) -> usize {
    match kind {
        PoolingHeadKind::FirstOrderMean => d,
        PoolingHeadKind::Mbdc => concat_width(heads, d),
        PoolingHeadKind::SingleHeadBdc | PoolingHeadKind::CovarianceTriu => triu_len(d),
    }
}

impl PoolingParams {
    pub fn init(kind: PoolingHeadKind, heads: usize, d: usize, d_tilde: usize, hidden: usize, seed: u64) -> Result<Self> {
        let heads = match kind {
            PoolingHeadKind::Mbdc => heads,
            _ => 1,
        };
        if matches!(kind, PoolingHeadKind::Mbdc | PoolingHeadKind::SingleHeadBdc) {
            return Ok(Self::from_mbdc(kind, MbdcParams::init(heads, d, d_tilde, hidden, seed)?));
        }
        if d == 0 || hidden == 0 || d_tilde == 0 {
            return Err(Error::Config("pooling dimensions must be >= 1".into()));
        }
        let width = statistic_width(kind, heads, d);
        let mut rng = SeededRng::new(seed);
        let w1 = rng.uniform_tensor(width, hidden, 1.0 / (width as f64).sqrt());
        let w2 = rng.uniform_tensor(hidden, d_tilde, 1.0 / (hidden as f64).sqrt());
        Ok(Self {
            kind,
            heads,
            d,
            d_tilde,
            hidden,
            w1,
            w2,
            ln_gain: Tensor::ones(1, width),
            ln_bias: Tensor::zeros(1, width),
            eps: DEFAULT_BDC_EPS,
        })
    }

    fn from_mbdc(kind: PoolingHeadKind, p: MbdcParams) -> Self {
        Self {
            kind,
            heads: p.heads,
            d: p.d,
            d_tilde: p.d_tilde,
            hidden: p.hidden,
            w1: p.w1,
            w2: p.w2,
            ln_gain: p.ln_gain,
            ln_bias: p.ln_bias,
            eps: p.eps,
        }
    }

    /// The same weights viewed as an MBDC head, for the BDC kinds.
    pub fn as_mbdc(&self) -> Option<MbdcParams> {
        match self.kind {
            PoolingHeadKind::Mbdc | PoolingHeadKind::SingleHeadBdc => Some(MbdcParams {
                heads: self.heads,
                d: self.d,
                d_tilde: self.d_tilde,
                hidden: self.hidden,
                w1: self.w1.clone(),
                w2: self.w2.clone(),
                ln_gain: self.ln_gain.clone(),
                ln_bias: self.ln_bias.clone(),
                eps: self.eps,
            }),
            _ => None,
        }
    }

    pub fn statistic_width(&self) -> usize {
        statistic_width(self.kind, self.heads, self.d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == PoolingHeadKind::SingleHeadBdc && self.heads != 1 {
            return Err(Error::Config("single-head bdc must have h = 1".into()));
        }
        if let Some(m) = self.as_mbdc() {
            return m.validate();
        }
        let width = self.statistic_width();
        for (name, t, shape) in [
            ("w1", &self.w1, (width, self.hidden)),
            ("w2", &self.w2, (self.hidden, self.d_tilde)),
            ("ln_gain", &self.ln_gain, (1, width)),
            ("ln_bias", &self.ln_bias, (1, width)),
        ] {
            if t.shape() != shape {
                return Err(Error::Config(format!(
                    "{} head {name} has shape {:?}, expected {shape:?}",
                    self.kind,
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w1", &self.w1),
            ("w2", &self.w2),
            ("ln_gain", &self.ln_gain),
            ("ln_bias", &self.ln_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.w2, &mut self.ln_gain, &mut self.ln_bias]
    }

    /// Bind existing nodes, in the order of [`Self::named_tensors`].
    pub fn vars_from(&self, ids: &[NodeId]) -> PoolingVars {
        PoolingVars {
            kind: self.kind,
            heads: self.heads,
            d: self.d,
            eps: self.eps,
            w1: ids[0],
            w2: ids[1],
            ln_gain: ids[2],
            ln_bias: ids[3],
        }
    }

    pub fn register(&self, tape: &mut Tape) -> PoolingVars {
        let ids: Vec<NodeId> = self.named_tensors().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        self.vars_from(&ids)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let xn = tape.constant(x.clone());
        let out = vars.forward(&mut tape, xn)?;
        Ok(tape.value(out).clone())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = PoolingManifest {
            kind: self.kind,
            h: self.heads,
            d: self.d,
            d_tilde: self.d_tilde,
            q: self.hidden,
            eps: self.eps,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        for (name, t) in self.named_tensors() {
            write_blob(&dir.join(format!("{name}.blob")), t)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: PoolingManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let p = Self {
            kind: m.kind,
            heads: m.h,
            d: m.d,
            d_tilde: m.d_tilde,
            hidden: m.q,
            w1: read_blob(&dir.join("w1.blob"))?,
            w2: read_blob(&dir.join("w2.blob"))?,
            ln_gain: read_blob(&dir.join("ln_gain.blob"))?,
            ln_bias: read_blob(&dir.join("ln_bias.blob"))?,
            eps: m.eps,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolingManifest {
    kind: PoolingHeadKind,
    h: usize,
    d: usize,
    d_tilde: usize,
    q: usize,
    eps: f64,
}

/// Tape handles of a [`PoolingParams`].
#[derive(Debug, Clone, Copy)]
pub struct PoolingVars {
    pub kind: PoolingHeadKind,
    pub heads: usize,
    pub d: usize,
    pub eps: f64,
    pub w1: NodeId,
    pub w2: NodeId,
    pub ln_gain: NodeId,
    pub ln_bias: NodeId,
}

impl PoolingVars {
    pub fn ids(&self) -> [NodeId; 4] {
        [self.w1, self.w2, self.ln_gain, self.ln_bias]
    }

    fn as_mbdc(&self) -> MbdcVars {
        MbdcVars {
            heads: self.heads,
            d: self.d,
            eps: self.eps,
            w1: self.w1,
            w2: self.w2,
            ln_gain: self.ln_gain,
            ln_bias: self.ln_bias,
        }
    }

    /// The pre-projection statistic, `1 x statistic_width`.
    pub fn statistic(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let (m, cols) = tape.shape(x);
        if cols != self.d {
            return Err(Error::Shape {
                op: "pooling head",
                left: (m, cols),
                right: (m, self.d),
            });
        }
        if m < self.kind.min_tokens() {
            return Err(if self.kind == PoolingHeadKind::CovarianceTriu {
                Error::DegenerateSample(format!("covariance needs M >= 2 tokens, got {m}"))
            } else {
                Error::Param("pooling needs at least one token".into())
            });
        }
        match self.kind {
            PoolingHeadKind::Mbdc | PoolingHeadKind::SingleHeadBdc => self.as_mbdc().triangles(tape, x),
            PoolingHeadKind::CovarianceTriu => {
                let cov = covariance_node(tape, x)?;
                tape.triu_vec(cov)
            }
            PoolingHeadKind::FirstOrderMean => {
                let x = canonical_row_order(tape, x)?;
                tape.mean_rows(x)
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let v = self.statistic(tape, x)?;
        ln_ffn(tape, v, self.ln_gain, self.ln_bias, self.w1, self.w2)
    }
}

/// MBDC with a single head; identical to `mbdc_forward` at `h = 1`.
pub fn single_head_bdc(x: &Tensor, params: &PoolingParams) -> Result<Tensor> {
    if params.kind != PoolingHeadKind::SingleHeadBdc {
        return Err(Error::Config(format!("expected a bdc head, got {}", params.kind)));
    }
    params.forward(x)
}
