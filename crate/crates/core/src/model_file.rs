//! Versioned binary container for fitted models.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then each conditional's parameters as little-endian `f64`s in
//! feature order. All integers are little-endian.

use serde::{Deserialize, Serialize};

use crate::autoregressive::AutoregressiveModel;
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::mdn::{ConditionalDensityNetwork, MdnShape};
use crate::swap::SwapSampler;

pub const MAGIC: &[u8; 8] = b"KNOCKFRG";
pub const FORMAT_VERSION: u32 = 1;
/// Where the input skip connection enters each conditional network.
pub const SKIP_PLACEMENT: &str = "last_hidden_pre_activation";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Joint,
    Knockoff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub format_version: u32,
    pub kind: ModelKind,
    pub d: usize,
    pub base_dim: usize,
    pub components: usize,
    pub hidden: usize,
    /// Feature ordering of the autoregressive factorization.
    pub column_names: Vec<String>,
    pub skip_placement: String,
    pub standardizer: Standardizer,
    pub support: Vec<(f64, f64)>,
    /// Parameter count of each conditional, in order.
    pub blocks: Vec<usize>,
    pub sampler: Option<SwapSampler>,
}

/// A model with everything needed to use it on raw data.
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub kind: ModelKind,
    pub column_names: Vec<String>,
    pub standardizer: Standardizer,
    pub model: AutoregressiveModel,
    pub sampler: Option<SwapSampler>,
}

impl ModelFile {
    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn header(&self) -> Result<ModelHeader> {
        let nets = self.model.conditionals();
        let first = nets[0].shape();
        if nets.iter().any(|n| n.components() != first.components || n.shape().hidden != first.hidden) {
            return Err(Error::ModelFormat("conditionals differ in size".into()));
        }
        Ok(ModelHeader {
            format_version: FORMAT_VERSION,
            kind: self.kind,
            d: self.model.dim(),
            base_dim: self.model.base_dim(),
            components: first.components,
            hidden: first.hidden,
            column_names: self.column_names.clone(),
            skip_placement: SKIP_PLACEMENT.to_string(),
            standardizer: self.standardizer.clone(),
            support: self.model.support().to_vec(),
            blocks: nets.iter().map(|n| n.param_count()).collect(),
            sampler: self.sampler.clone(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header()?)?;
        let n_params: usize = self.model.conditionals().iter().map(|c| c.param_count()).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 8 * n_params);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for net in self.model.conditionals() {
            for p in net.params() {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::ModelFormat(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("not a knockoff-forge model file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20usize.saturating_add(header_len))
            .ok_or_else(|| fail("truncated header"))?;
        let header: ModelHeader =
            serde_json::from_slice(body).map_err(|e| Error::ModelFormat(format!("bad header: {e}")))?;
        validate_header(&header, version)?;

        let mut offset = 20 + header_len;
        let mut conditionals = Vec::with_capacity(header.d);
        for (j, &count) in header.blocks.iter().enumerate() {
            let end = offset + 8 * count;
            let raw = bytes.get(offset..end).ok_or_else(|| fail("truncated parameter block"))?;
            let params = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let shape = MdnShape {
                input_dim: header.base_dim + j,
                hidden: header.hidden,
                components: header.components,
            };
            let net = ConditionalDensityNetwork::from_params(shape, params)
                .map_err(|e| Error::ModelFormat(format!("conditional {j}: {e}")))?;
            conditionals.push(net);
            offset = end;
        }
        if offset != bytes.len() {
            return Err(fail("trailing bytes after parameter blocks"));
        }
        let model = AutoregressiveModel::from_parts(header.base_dim, conditionals, header.support)
            .map_err(|e| Error::ModelFormat(e.to_string()))?;
        Ok(Self {
            kind: header.kind,
            column_names: header.column_names,
            standardizer: header.standardizer,
            model,
            sampler: header.sampler,
        })
    }
}

fn validate_header(h: &ModelHeader, version: u32) -> Result<()> {
    let fail = |m: String| Err(Error::ModelFormat(m));
    if h.format_version != version {
        return fail("header and container versions differ".into());
    }
    if h.d == 0 || h.components == 0 || h.hidden == 0 {
        return fail("d, components and hidden must be positive".into());
    }
    if h.column_names.len() != h.d || h.support.len() != h.d || h.blocks.len() != h.d || h.standardizer.dim() != h.d {
        return fail(format!("header fields disagree with d={}", h.d));
    }
    if h.skip_placement != SKIP_PLACEMENT {
        return fail(format!("unsupported skip placement {:?}", h.skip_placement));
    }
    let expected_base = match h.kind {
        ModelKind::Joint => 0,
        ModelKind::Knockoff => h.d,
    };
    if h.base_dim != expected_base {
        return fail(format!("{:?} model with base dimension {}", h.kind, h.base_dim));
    }
    for (j, &count) in h.blocks.iter().enumerate() {
        let shape = MdnShape {
            input_dim: h.base_dim + j,
            hidden: h.hidden,
            components: h.components,
        };
        if shape.param_count() != count {
            return fail(format!("block {j} has {count} parameters, expected {}", shape.param_count()));
        }
    }
    match (&h.kind, &h.sampler) {
        (ModelKind::Knockoff, Some(s)) if s.dim() == h.d => Ok(()),
        (ModelKind::Knockoff, _) => fail("knockoff model needs a swap sampler of matching dimension".into()),
        (ModelKind::Joint, None) => Ok(()),
        (ModelKind::Joint, Some(_)) => fail("joint model must not carry a swap sampler".into()),
    }
}
