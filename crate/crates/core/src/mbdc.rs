//! Multi-head Brownian distance covariance pooling.
//!
//! Token features `x` (`M x d`) are split into `h` contiguous channel
//! groups. Each group yields a `(d/h) x (d/h)` BDC matrix whose upper
//! triangle (with diagonal, `l` entries) is kept. The `h` triangles are
//! concatenated, layer-normalized and mixed by a bias-free two-layer
//! feed-forward block (`h·l -> q -> d̃`, relu in between), giving a
//! fixed-length second-order embedding whatever the token count.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bdc::{bdc_node, DEFAULT_BDC_EPS};
use crate::error::{Error, Result};
use crate::numcore::{read_blob, triu_len, write_blob, NodeId, Tape, Tensor};
use crate::rng::SeededRng;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct MbdcParams {
    pub heads: usize,
    pub d: usize,
    pub d_tilde: usize,
    pub hidden: usize,
    /// `(h·l) x hidden`
    pub w1: Tensor,
    /// `hidden x d_tilde`
    pub w2: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub eps: f64,
}

/// Per-head triangle length `l = ((d/h) + 1)(d/h) / 2`.
pub fn head_triu_len(heads: usize, d: usize) -> usize {
    triu_len(d / heads)
}

/// Width of the concatenated per-head triangles, `h·l`.
pub fn concat_width(heads: usize, d: usize) -> usize {
    heads * head_triu_len(heads, d)
}

fn check_heads(heads: usize, d: usize) -> Result<()> {
    if heads == 0 || d == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "head count h={heads} must divide channel count d={d}"
        )));
    }
    Ok(())
}

/// Contiguous column blocks of `x`, one per head.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Vec<Tensor>> {
    check_heads(heads, x.cols())?;
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let parts = tape.split_cols(xn, heads)?;
    Ok(parts.into_iter().map(|p| tape.value(p).clone()).collect())
}

/// Layer norm followed by the bias-free `relu` feed-forward block.
pub(crate) fn ln_ffn(
    tape: &mut Tape,
    v: NodeId,
    gain: NodeId,
    bias: NodeId,
    w1: NodeId,
    w2: NodeId,
) -> Result<NodeId> {
    let normed = tape.layer_norm(v, gain, bias, LN_EPS)?;
    let hidden = tape.matmul(normed, w1)?;
    let hidden = tape.relu(hidden)?;
    tape.matmul(hidden, w2)
}

impl MbdcParams {
    /// Fan-in scaled uniform weights, identity layer-norm affine.
    pub fn init(heads: usize, d: usize, d_tilde: usize, hidden: usize, seed: u64) -> Result<Self> {
        check_heads(heads, d)?;
        if hidden == 0 || d_tilde == 0 {
            return Err(Error::Config("hidden width and output dimension must be >= 1".into()));
        }
        let width = concat_width(heads, d);
        let mut rng = SeededRng::new(seed);
        let w1 = rng.uniform_tensor(width, hidden, 1.0 / (width as f64).sqrt());
        let w2 = rng.uniform_tensor(hidden, d_tilde, 1.0 / (hidden as f64).sqrt());
        Ok(Self {
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

    pub fn concat_width(&self) -> usize {
        concat_width(self.heads, self.d)
    }

    pub fn validate(&self) -> Result<()> {
        check_heads(self.heads, self.d)?;
        let width = self.concat_width();
        let expect = [
            ("w1", &self.w1, (width, self.hidden)),
            ("w2", &self.w2, (self.hidden, self.d_tilde)),
            ("ln_gain", &self.ln_gain, (1, width)),
            ("ln_bias", &self.ln_bias, (1, width)),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape {
                return Err(Error::Config(format!(
                    "mbdc {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        if !(self.eps >= 0.0) {
            return Err(Error::Config(format!("mbdc eps must be >= 0, got {}", self.eps)));
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

    pub fn register(&self, tape: &mut Tape) -> MbdcVars {
        self.register_with(tape, &[
            self.w1.clone(),
            self.w2.clone(),
            self.ln_gain.clone(),
            self.ln_bias.clone(),
        ])
    }

    /// Register explicit values in the order of [`Self::named_tensors`].
    pub fn register_with(&self, tape: &mut Tape, values: &[Tensor]) -> MbdcVars {
        let ids: Vec<NodeId> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        self.vars_from(&ids)
    }

    /// Bind existing nodes, in the order of [`Self::named_tensors`].
    pub fn vars_from(&self, ids: &[NodeId]) -> MbdcVars {
        MbdcVars {
            heads: self.heads,
            d: self.d,
            eps: self.eps,
            w1: ids[0],
            w2: ids[1],
            ln_gain: ids[2],
            ln_bias: ids[3],
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = MbdcManifest {
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
        let m: MbdcManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let params = Self {
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
        params.validate()?;
        Ok(params)
    }
}

/// Checkpoint manifest written next to the parameter blobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MbdcManifest {
    pub h: usize,
    pub d: usize,
    pub d_tilde: usize,
    pub q: usize,
    pub eps: f64,
}

/// Tape handles of an [`MbdcParams`].
#[derive(Debug, Clone, Copy)]
pub struct MbdcVars {
    pub heads: usize,
    pub d: usize,
    pub eps: f64,
    pub w1: NodeId,
    pub w2: NodeId,
    pub ln_gain: NodeId,
    pub ln_bias: NodeId,
}

impl MbdcVars {
    pub fn ids(&self) -> [NodeId; 4] {
        [self.w1, self.w2, self.ln_gain, self.ln_bias]
    }

    /// Concatenated per-head triangles before normalization, `1 x h·l`.
    pub fn triangles(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let (_, cols) = tape.shape(x);
        if cols != self.d {
            return Err(Error::Shape {
                op: "mbdc_forward",
                left: tape.shape(x),
                right: (tape.shape(x).0, self.d),
            });
        }
        let blocks = tape.split_cols(x, self.heads)?;
        let mut tri = Vec::with_capacity(self.heads);
        for block in blocks {
            let b = bdc_node(tape, block, self.eps)?;
            tri.push(tape.triu_vec(b)?);
        }
        tape.concat_cols(&tri)
    }

    /// Second-order embedding `1 x d̃` of the token matrix `x`.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let v = self.triangles(tape, x)?;
        ln_ffn(tape, v, self.ln_gain, self.ln_bias, self.w1, self.w2)
    }
}

pub fn mbdc_forward(x: &Tensor, params: &MbdcParams) -> Result<Tensor> {
    params.validate()?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let xn = tape.constant(x.clone());
    let z = vars.forward(&mut tape, xn)?;
    Ok(tape.value(z).clone())
}
