use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{Attention, Conv2d, LayerNorm, Linear, Matrix, Mlp};
use super::ModelConfig;
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 4] = b"CEUP";
const PARAMS_VERSION: u32 = 1;
const INIT_RANGE: f32 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

/// Cross-attention + feed-forward unit bridging a block's input and output.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
}

/// 3x3 convolution followed by per-channel affine normalization and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    pub conv: Conv2d,
    pub norm_scale: Vec<f64>,
    pub norm_shift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub stages: Vec<ConvStage>,
    pub out: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub score: BranchParams,
    pub offset: BranchParams,
    pub size: BranchParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub frame_template_proj: Linear,
    pub frame_search_proj: Linear,
    pub voxel_template_proj: Linear,
    pub voxel_search_proj: Linear,
    pub pos_template: Matrix,
    pub pos_search: Matrix,
    pub blocks: Vec<BlockParams>,
    pub adapters: Vec<AdapterParams>,
    pub head: HeadParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// Offset in f32 elements from the start of the data section.
    pub offset: usize,
    pub shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

type NamedMut<'a> = (String, Vec<usize>, &'a mut Vec<f64>);

fn push_linear<'a>(out: &mut Vec<NamedMut<'a>>, name: &str, l: &'a mut Linear) {
    out.push((
        format!("{name}.weight"),
        vec![l.d_in, l.d_out],
        &mut l.weight,
    ));
    out.push((format!("{name}.bias"), vec![l.d_out], &mut l.bias));
}

fn push_norm<'a>(out: &mut Vec<NamedMut<'a>>, name: &str, n: &'a mut LayerNorm) {
    let d = n.gamma.len();
    out.push((format!("{name}.gamma"), vec![d], &mut n.gamma));
    out.push((format!("{name}.beta"), vec![d], &mut n.beta));
}

fn push_attention<'a>(out: &mut Vec<NamedMut<'a>>, name: &str, a: &'a mut Attention) {
    push_linear(out, &format!("{name}.q"), &mut a.q);
    push_linear(out, &format!("{name}.k"), &mut a.k);
    push_linear(out, &format!("{name}.v"), &mut a.v);
    push_linear(out, &format!("{name}.proj"), &mut a.proj);
}

fn push_mlp<'a>(out: &mut Vec<NamedMut<'a>>, name: &str, m: &'a mut Mlp) {
    push_linear(out, &format!("{name}.fc1"), &mut m.fc1);
    push_linear(out, &format!("{name}.fc2"), &mut m.fc2);
}

fn push_conv<'a>(out: &mut Vec<NamedMut<'a>>, name: &str, c: &'a mut Conv2d) {
    let shape = vec![c.out_ch, c.in_ch, c.kernel, c.kernel];
    out.push((format!("{name}.weight"), shape, &mut c.weight));
    out.push((format!("{name}.bias"), vec![c.out_ch], &mut c.bias));
}

fn push_branch<'a>(out: &mut Vec<NamedMut<'a>>, name: &str, b: &'a mut BranchParams) {
    for (i, s) in b.stages.iter_mut().enumerate() {
        push_conv(out, &format!("{name}.stage{i}.conv"), &mut s.conv);
        let d = s.norm_scale.len();
        out.push((
            format!("{name}.stage{i}.norm_scale"),
            vec![d],
            &mut s.norm_scale,
        ));
        out.push((
            format!("{name}.stage{i}.norm_shift"),
            vec![d],
            &mut s.norm_shift,
        ));
    }
    push_conv(out, &format!("{name}.out"), &mut b.out);
}

impl BranchParams {
    fn zeros(config: &ModelConfig, out_ch: usize) -> Self {
        let ch = config.head_channels();
        let mut in_ch = config.width;
        let stages = ch
            .iter()
            .map(|&c| {
                let s = ConvStage {
                    conv: Conv2d::zeros(in_ch, c, 3),
                    norm_scale: vec![0.0; c],
                    norm_shift: vec![0.0; c],
                };
                in_ch = c;
                s
            })
            .collect();
        Self {
            stages,
            out: Conv2d::zeros(in_ch, out_ch, 1),
        }
    }
}

impl ModelParams {
    /// Every tensor set to zero (including normalization gains).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.width;
        let block = || BlockParams {
            norm1: LayerNorm::zeros(c),
            attn: Attention::zeros(c, config.n_heads),
            norm2: LayerNorm::zeros(c),
            mlp: Mlp::zeros(c, c * config.mlp_ratio),
        };
        let adapter = || AdapterParams {
            norm1: LayerNorm::zeros(c),
            attn: Attention::zeros(c, config.n_heads),
            norm2: LayerNorm::zeros(c),
            ffn: Mlp::zeros(c, config.adapter_hidden),
        };
        Ok(Self {
            config: *config,
            frame_template_proj: Linear::zeros(config.frame_patch_dim(), c),
            frame_search_proj: Linear::zeros(config.frame_patch_dim(), c),
            voxel_template_proj: Linear::zeros(config.voxel_patch_dim(), c),
            voxel_search_proj: Linear::zeros(config.voxel_patch_dim(), c),
            pos_template: Matrix::zeros(config.n_template_tokens(), c),
            pos_search: Matrix::zeros(config.n_search_tokens(), c),
            blocks: (0..config.n_layers).map(|_| block()).collect(),
            adapters: (0..config.n_layers).map(|_| adapter()).collect(),
            head: HeadParams {
                score: BranchParams::zeros(config, 1),
                offset: BranchParams::zeros(config, 2),
                size: BranchParams::zeros(config, 2),
            },
        })
    }

    /// Seeded toy initialization: weights, biases and position embeddings
    /// uniform in [-0.02, 0.02] (drawn as f32), normalization gains 1, shifts 0.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, _, data) in p.named_tensors_mut() {
            let fill = if name.ends_with(".gamma") || name.ends_with(".norm_scale") {
                Some(1.0)
            } else if name.ends_with(".beta") || name.ends_with(".norm_shift") {
                Some(0.0)
            } else {
                None
            };
            for v in data.iter_mut() {
                *v = fill.unwrap_or_else(|| f64::from(rng.gen_range(-INIT_RANGE..=INIT_RANGE)));
            }
        }
        Ok(p)
    }

    /// All tensors in canonical order.
    pub fn named_tensors_mut(&mut self) -> Vec<NamedMut<'_>> {
        let mut out = Vec::new();
        push_linear(
            &mut out,
            "proj.frame_template",
            &mut self.frame_template_proj,
        );
        push_linear(&mut out, "proj.frame_search", &mut self.frame_search_proj);
        push_linear(
            &mut out,
            "proj.voxel_template",
            &mut self.voxel_template_proj,
        );
        push_linear(&mut out, "proj.voxel_search", &mut self.voxel_search_proj);
        let (pt, ps) = (&mut self.pos_template, &mut self.pos_search);
        out.push(("pos.template".into(), vec![pt.rows, pt.cols], &mut pt.data));
        out.push(("pos.search".into(), vec![ps.rows, ps.cols], &mut ps.data));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            push_norm(&mut out, &format!("block{i}.norm1"), &mut b.norm1);
            push_attention(&mut out, &format!("block{i}.attn"), &mut b.attn);
            push_norm(&mut out, &format!("block{i}.norm2"), &mut b.norm2);
            push_mlp(&mut out, &format!("block{i}.mlp"), &mut b.mlp);
        }
        for (i, a) in self.adapters.iter_mut().enumerate() {
            push_norm(&mut out, &format!("adapter{i}.norm1"), &mut a.norm1);
            push_attention(&mut out, &format!("adapter{i}.attn"), &mut a.attn);
            push_norm(&mut out, &format!("adapter{i}.norm2"), &mut a.norm2);
            push_mlp(&mut out, &format!("adapter{i}.ffn"), &mut a.ffn);
        }
        push_branch(&mut out, "head.score", &mut self.head.score);
        push_branch(&mut out, "head.offset", &mut self.head.offset);
        push_branch(&mut out, "head.size", &mut self.head.size);
        out
    }

    pub fn n_values(&mut self) -> usize {
        self.named_tensors_mut()
            .iter()
            .map(|(_, _, d)| d.len())
            .sum()
    }

    /// Adds seeded uniform noise in `[-eps, eps]` to every tensor.
    pub fn perturb(&mut self, seed: u64, eps: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, _, data) in self.named_tensors_mut() {
            for v in data.iter_mut() {
                *v += rng.gen_range(-eps..=eps);
            }
        }
    }

    /// `CEUP` magic, u32 version, u64 manifest length, JSON manifest
    /// (config plus name/offset/shape per tensor), then little-endian f32 data.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut copy = self.clone();
        let tensors = copy.named_tensors_mut();
        let mut entries = Vec::with_capacity(tensors.len());
        let mut offset = 0usize;
        for (name, shape, data) in &tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                offset,
                shape: shape.clone(),
            });
            offset += data.len();
        }
        let manifest = serde_json::to_vec(&Manifest {
            config: self.config,
            tensors: entries,
        })
        .expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + manifest.len() + offset * 4);
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, _, data) in &tensors {
            for &v in data.iter() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, msg: String| Error::ParseAt { offset, msg };
        if bytes.len() < 16 || &bytes[..4] != PARAMS_MAGIC {
            return Err(err(0, "not a parameter container (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != PARAMS_VERSION {
            return Err(err(4, format!("unsupported container version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let manifest_bytes = bytes
            .get(16..16 + mlen)
            .ok_or_else(|| err(bytes.len(), "truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(manifest_bytes)
            .map_err(|e| err(16, format!("bad manifest: {e}")))?;
        let data = &bytes[16 + mlen..];
        if !data.len().is_multiple_of(4) {
            return Err(err(
                bytes.len(),
                "data section not a whole number of f32".into(),
            ));
        }
        let n_data = data.len() / 4;
        let by_name: BTreeMap<&str, &TensorEntry> = manifest
            .tensors
            .iter()
            .map(|t| (t.name.as_str(), t))
            .collect();
        let mut params = Self::zeros(&manifest.config)?;
        let tensors = params.named_tensors_mut();
        if tensors.len() != manifest.tensors.len() {
            return Err(Error::Shape(format!(
                "container has {} tensors, model expects {}",
                manifest.tensors.len(),
                tensors.len()
            )));
        }
        for (name, shape, dst) in tensors {
            let entry = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Shape(format!("tensor {name} missing from container")))?;
            if entry.shape != shape {
                return Err(Error::Shape(format!(
                    "tensor {name}: shape {:?} in container, expected {shape:?}",
                    entry.shape
                )));
            }
            if entry.offset + dst.len() > n_data {
                return Err(err(
                    16 + mlen + entry.offset * 4,
                    format!("tensor {name} truncated"),
                ));
            }
            let raw = &data[entry.offset * 4..(entry.offset + dst.len()) * 4];
            for (v, c) in dst.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")));
            }
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            ..ModelConfig::toy(8, 2)
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ModelParams::init(&tiny(), 3).unwrap();
        assert_eq!(a, ModelParams::init(&tiny(), 3).unwrap());
        assert_ne!(a, ModelParams::init(&tiny(), 4).unwrap());
        let mut a = a;
        for (name, _, d) in a.named_tensors_mut() {
            if name.ends_with(".gamma") {
                assert!(d.iter().all(|&v| v == 1.0));
            } else if !name.ends_with(".beta") && !name.contains("norm_s") {
                assert!(d.iter().all(|v| v.abs() <= 0.02 + 1e-9), "{name}");
            }
        }
    }

    #[test]
    fn container_round_trip() {
        let p = ModelParams::init(&tiny(), 11).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(ModelParams::from_bytes(&bytes).unwrap(), p);
        assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(ModelParams::from_bytes(b"NOPE0000000000000000").is_err());
    }

    #[test]
    fn tensor_names_unique() {
        let mut p = ModelParams::zeros(&tiny()).unwrap();
        let names: std::collections::BTreeSet<String> = p
            .named_tensors_mut()
            .into_iter()
            .map(|(n, _, _)| n)
            .collect();
        let count = p.named_tensors_mut().len();
        assert_eq!(names.len(), count);
    }
}
