//! Per-token MLP towers with first-order and pluggable second-order pooling.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::counterparts::{PoolingHeadKind, PoolingParams, PoolingVars};
use crate::error::{Error, Result};
use crate::numcore::{read_blob, write_blob, NodeId, Tape, Tensor};
use crate::objective::EmbeddingBatch;
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TowerConfig {
    pub raw_dim: usize,
    pub d_mid: usize,
    /// Token feature width `d`.
    pub d: usize,
    pub heads: usize,
    pub d_tilde: usize,
    /// Hidden width `q` of the pooling feed-forward block.
    pub hidden: usize,
    pub pooling: PoolingHeadKind,
    /// One pooling head for both modalities.
    pub shared_head: bool,
}

impl Default for TowerConfig {
    fn default() -> Self {
        Self {
            raw_dim: 16,
            d_mid: 32,
            d: 16,
            heads: 4,
            d_tilde: 16,
            hidden: 32,
            pooling: PoolingHeadKind::Mbdc,
            shared_head: true,
        }
    }
}

impl TowerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.raw_dim == 0 || self.d_mid == 0 || self.d == 0 || self.d_tilde == 0 || self.hidden == 0 {
            return Err(Error::Config("tower dimensions must be >= 1".into()));
        }
        if self.pooling == PoolingHeadKind::Mbdc && (self.heads == 0 || self.d % self.heads != 0) {
            return Err(Error::Config(format!(
                "head count h={} must divide d={}",
                self.heads, self.d
            )));
        }
        Ok(())
    }
}

/// Token encoder `relu(x·P1)·P2`, applied row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub proj1: Tensor,
    pub proj2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerParams {
    pub config: TowerConfig,
    pub image: Tower,
    pub text: Tower,
    /// `d x d` projection after mean pooling, shared by both modalities.
    pub first_proj: Tensor,
    /// One head when shared, otherwise `[image, text]`.
    pub pooling: Vec<PoolingParams>,
    pub log_tau: f64,
}

/// Tape handles for every parameter of a [`TowerParams`].
#[derive(Debug, Clone)]
pub struct TowerVars {
    pub image: (NodeId, NodeId),
    pub text: (NodeId, NodeId),
    pub first_proj: NodeId,
    pub pooling: Vec<PoolingVars>,
    pub log_tau: NodeId,
    /// All leaves in [`TowerParams::named_tensors`] order.
    pub all: Vec<NodeId>,
}

/// Embedding nodes for one batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchNodes {
    pub image_first: NodeId,
    pub text_first: NodeId,
    pub image_second: NodeId,
    pub text_second: NodeId,
}

impl TowerParams {
    pub fn init(config: &TowerConfig, log_tau: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::stream(seed, 10);
        let mut uniform = |rows: usize, cols: usize| rng.uniform_tensor(rows, cols, 1.0 / (rows as f64).sqrt());
        let image = Tower {
            proj1: uniform(config.raw_dim, config.d_mid),
            proj2: uniform(config.d_mid, config.d),
        };
        let text = Tower {
            proj1: uniform(config.raw_dim, config.d_mid),
            proj2: uniform(config.d_mid, config.d),
        };
        let first_proj = uniform(config.d, config.d);
        let heads = if config.shared_head { 1 } else { 2 };
        let pooling = (0..heads)
            .map(|i| {
                PoolingParams::init(
                    config.pooling,
                    config.heads,
                    config.d,
                    config.d_tilde,
                    config.hidden,
                    seed.wrapping_mul(31).wrapping_add(i as u64 + 1),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            image,
            text,
            first_proj,
            pooling,
            log_tau,
        })
    }

    pub fn group_names(&self) -> Vec<String> {
        self.named_tensors().into_iter().map(|(n, _)| n).collect()
    }

    /// Every trainable tensor with a stable name; `log_tau` comes last as `1 x 1`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("image.proj1".to_string(), self.image.proj1.clone()),
            ("image.proj2".to_string(), self.image.proj2.clone()),
            ("text.proj1".to_string(), self.text.proj1.clone()),
            ("text.proj2".to_string(), self.text.proj2.clone()),
            ("first_proj".to_string(), self.first_proj.clone()),
        ];
        for (i, p) in self.pooling.iter().enumerate() {
            let prefix = self.pooling_prefix(i);
            for (name, t) in p.named_tensors() {
                out.push((format!("{prefix}.{name}"), t.clone()));
            }
        }
        out.push(("log_tau".to_string(), Tensor::filled(1, 1, self.log_tau)));
        out
    }

    fn pooling_prefix(&self, i: usize) -> &'static str {
        match (self.pooling.len(), i) {
            (1, _) => "pool",
            (_, 0) => "pool_image",
            _ => "pool_text",
        }
    }

    /// Replace every tensor, in [`Self::named_tensors`] order.
    pub fn set_tensors(&mut self, values: &[Tensor]) -> Result<()> {
        let expected = self.named_tensors();
        if values.len() != expected.len() {
            return Err(Error::Param(format!("expected {} tensors, got {}", expected.len(), values.len())));
        }
        for ((name, old), new) in expected.iter().zip(values) {
            if old.shape() != new.shape() {
                return Err(Error::Param(format!(
                    "{name}: shape {:?}, expected {:?}",
                    new.shape(),
                    old.shape()
                )));
            }
        }
        let mut it = values.iter().cloned();
        self.image.proj1 = it.next().unwrap();
        self.image.proj2 = it.next().unwrap();
        self.text.proj1 = it.next().unwrap();
        self.text.proj2 = it.next().unwrap();
        self.first_proj = it.next().unwrap();
        for p in &mut self.pooling {
            for slot in p.tensors_mut() {
                *slot = it.next().unwrap();
            }
        }
        self.log_tau = it.next().unwrap().item()?;
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape) -> TowerVars {
        let ids: Vec<NodeId> = self.named_tensors().into_iter().map(|(_, t)| tape.leaf(t)).collect();
        self.vars_from(&ids)
    }

    /// Bind nodes given in [`Self::named_tensors`] order.
    pub fn vars_from(&self, ids: &[NodeId]) -> TowerVars {
        let pooling = self
            .pooling
            .iter()
            .enumerate()
            .map(|(i, p)| p.vars_from(&ids[5 + 4 * i..9 + 4 * i]))
            .collect();
        TowerVars {
            image: (ids[0], ids[1]),
            text: (ids[2], ids[3]),
            first_proj: ids[4],
            pooling,
            log_tau: *ids.last().expect("non-empty"),
            all: ids.to_vec(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = TowerManifest {
            config: self.config.clone(),
            log_tau: self.log_tau,
            tensors: self.group_names(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        for (name, t) in self.named_tensors() {
            if name != "log_tau" {
                write_blob(&dir.join(format!("{name}.blob")), &t)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: TowerManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let mut params = Self::init(&m.config, m.log_tau, 0)?;
        if m.tensors != params.group_names() {
            return Err(Error::Config(format!("checkpoint tensor list {:?} does not match config", m.tensors)));
        }
        let values = m
            .tensors
            .iter()
            .map(|name| {
                if name == "log_tau" {
                    Tensor::scalar(m.log_tau)
                } else {
                    read_blob(&dir.join(format!("{name}.blob")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        params.set_tensors(&values)?;
        Ok(params)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TowerManifest {
    config: TowerConfig,
    log_tau: f64,
    tensors: Vec<String>,
}

impl TowerVars {
    fn pooling_for(&self, text: bool) -> &PoolingVars {
        if text && self.pooling.len() > 1 {
            &self.pooling[1]
        } else {
            &self.pooling[0]
        }
    }

    /// First- and second-order embeddings of one modality, `N` samples.
    fn encode(&self, tape: &mut Tape, samples: &[&Tensor], text: bool, second: bool) -> Result<(NodeId, Option<NodeId>)> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let (p1, p2) = if text { self.text } else { self.image };
        let mut firsts = Vec::with_capacity(samples.len());
        let mut seconds = Vec::with_capacity(samples.len());
        let stacked = Tensor::vstack(samples)?;
        let x = tape.constant(stacked);
        let h = tape.matmul(x, p1)?;
        let h = tape.relu(h)?;
        let tokens = tape.matmul(h, p2)?;
        let mut offset = 0;
        for s in samples {
            let m = s.rows();
            let block = tape.slice_rows(tokens, offset, m)?;
            offset += m;
            firsts.push(tape.mean_rows(block)?);
            if second {
                seconds.push(self.pooling_for(text).forward(tape, block)?);
            }
        }
        let pooled = tape.concat_rows(&firsts)?;
        let f = tape.matmul(pooled, self.first_proj)?;
        let f = tape.l2_normalize(f)?;
        let z = if second { Some(tape.concat_rows(&seconds)?) } else { None };
        Ok((f, z))
    }

    fn check_pairs(image: &[&Tensor], text: &[&Tensor]) -> Result<()> {
        if image.len() != text.len() {
            return Err(Error::Param(format!("{} images but {} texts", image.len(), text.len())));
        }
        Ok(())
    }

    /// First-order embeddings only, `(image, text)`.
    pub fn forward_first(&self, tape: &mut Tape, image: &[&Tensor], text: &[&Tensor]) -> Result<(NodeId, NodeId)> {
        Self::check_pairs(image, text)?;
        let (fi, _) = self.encode(tape, image, false, false)?;
        let (ft, _) = self.encode(tape, text, true, false)?;
        Ok((fi, ft))
    }

    pub fn forward(&self, tape: &mut Tape, image: &[&Tensor], text: &[&Tensor]) -> Result<BatchNodes> {
        Self::check_pairs(image, text)?;
        let (image_first, image_second) = self.encode(tape, image, false, true)?;
        let (text_first, text_second) = self.encode(tape, text, true, true)?;
        Ok(BatchNodes {
            image_first,
            text_first,
            image_second: image_second.expect("second-order branch"),
            text_second: text_second.expect("second-order branch"),
        })
    }
}

/// Embed paired samples without tracking gradients, `chunk` pairs at a time.
pub fn embed(params: &TowerParams, image: &[Tensor], text: &[Tensor], chunk: usize) -> Result<EmbeddingBatch> {
    if image.is_empty() {
        return Err(Error::EmptySplit);
    }
    let chunk = chunk.max(1);
    let mut parts: [Vec<Tensor>; 4] = Default::default();
    let mut start = 0;
    while start < image.len() {
        let end = (start + chunk).min(image.len());
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let imgs: Vec<&Tensor> = image[start..end].iter().collect();
        let txts: Vec<&Tensor> = text[start..end].iter().collect();
        let nodes = vars.forward(&mut tape, &imgs, &txts)?;
        for (slot, id) in parts
            .iter_mut()
            .zip([nodes.image_first, nodes.text_first, nodes.image_second, nodes.text_second])
        {
            slot.push(tape.value(id).clone());
        }
        start = end;
    }
    let cat = |v: &Vec<Tensor>| Tensor::vstack(&v.iter().collect::<Vec<_>>());
    Ok(EmbeddingBatch {
        image_first: cat(&parts[0])?,
        text_first: cat(&parts[1])?,
        image_second: cat(&parts[2])?,
        text_second: cat(&parts[3])?,
    })
}
