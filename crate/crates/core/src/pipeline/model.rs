//! Learnable parameters and their on-disk format.
//!
//! Model file layout (all integers little-endian):
//!
//! ```text
//! magic       4 bytes  "ISBM"
//! version     u32      MODEL_VERSION
//! header_len  u32
//! header      header_len bytes of JSON (ModelConfig)
//! count       u64      number of parameters
//! params      count x f64
//! ```
//!
//! Parameters are stored in [`ModelParams::flatten`] order.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{Heads, PaBlock, DEFAULT_NEIGHBORS, DEFAULT_RADII};
use crate::dynconv::KernelLayout;
use crate::error::{Error, Result};
use crate::nn::{Dense, Mlp};

pub const MODEL_MAGIC: &[u8; 4] = b"ISBM";
pub const MODEL_VERSION: u32 = 1;

/// Width of the per-point encoder input (see `encoder_inputs`).
pub const ENCODER_INPUT_DIM: usize = 18;

/// Shapes of every learnable block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub version: u32,
    pub input_dim: usize,
    /// Point feature width `D`.
    pub feature_dim: usize,
    /// Mask feature width `H`.
    pub mask_dim: usize,
    /// Semantic classes `C`, background included.
    pub num_classes: usize,
    /// Dynamic-convolution layout; its input width encodes the geo cue.
    pub kernel_dims: Vec<usize>,
    pub geo_cue: bool,
    pub radii: Vec<f64>,
    pub neighbors: usize,
}

impl ModelConfig {
    /// Default widths `D = H = 32`, layout `(41, 32, 1)`.
    pub fn new(num_classes: usize, geo_cue: bool) -> Self {
        let layout = KernelLayout::for_mask_width(32, &[32], geo_cue).expect("static layout");
        ModelConfig {
            version: MODEL_VERSION,
            input_dim: ENCODER_INPUT_DIM,
            feature_dim: 32,
            mask_dim: 32,
            num_classes,
            kernel_dims: layout.dims,
            geo_cue,
            radii: DEFAULT_RADII.to_vec(),
            neighbors: DEFAULT_NEIGHBORS,
        }
    }

    pub fn layout(&self) -> Result<KernelLayout> {
        KernelLayout::new(self.kernel_dims.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let layout = self.layout()?;
        let expected = self.mask_dim + 3 + if self.geo_cue { 6 } else { 0 };
        if layout.input_width() != expected {
            return Err(Error::invalid(format!(
                "kernel input width {} does not match mask width {} (geo cue {})",
                layout.input_width(),
                self.mask_dim,
                self.geo_cue
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need background plus at least one instance class"));
        }
        if self.radii.is_empty() || self.radii.iter().any(|r| !(*r > 0.0)) || self.neighbors == 0 {
            return Err(Error::invalid("aggregation blocks need positive radii and neighbors"));
        }
        if self.feature_dim == 0 || self.mask_dim == 0 || self.input_dim != ENCODER_INPUT_DIM {
            return Err(Error::invalid("bad model widths"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `input -> D -> D -> D`, ReLU after every layer.
    pub encoder: Mlp,
    pub semantic: Dense,
    pub point_box: Dense,
    pub mask_features: Dense,
    pub blocks: Vec<PaBlock>,
    pub heads: Heads,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.feature_dim;
        let layout = config.layout()?;
        let encoder = Mlp::init(&[config.input_dim, d, d, d], true, &mut rng);
        let semantic = Dense::init(d, config.num_classes, &mut rng);
        let point_box = Dense::init(d, 6, &mut rng);
        let mask_features = Dense::init(d, config.mask_dim, &mut rng);
        let blocks = config
            .radii
            .iter()
            .map(|&r| PaBlock::init(r, config.neighbors, d, &mut rng))
            .collect();
        let heads = Heads::init(d, config.num_classes, &layout, &mut rng);
        Ok(ModelParams {
            config,
            encoder,
            semantic,
            point_box,
            mask_features,
            blocks,
            heads,
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.feature_dim;
        let layout = config.layout()?;
        Ok(ModelParams {
            encoder: Mlp::zeros(&[config.input_dim, d, d, d], true),
            semantic: Dense::zeros(d, config.num_classes),
            point_box: Dense::zeros(d, 6),
            mask_features: Dense::zeros(d, config.mask_dim),
            blocks: config
                .radii
                .iter()
                .map(|&r| PaBlock::zeros(r, config.neighbors, d))
                .collect(),
            heads: Heads::zeros(d, config.num_classes, &layout),
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(self.config.clone()).expect("config already validated")
    }

    fn denses(&self) -> Vec<&Dense> {
        let mut out: Vec<&Dense> = self.encoder.layers.iter().collect();
        out.extend([&self.semantic, &self.point_box, &self.mask_features]);
        for b in &self.blocks {
            out.extend(b.mlp.layers.iter());
        }
        out.extend([
            &self.heads.class,
            &self.heads.bbox,
            &self.heads.kernel,
            &self.heads.quality,
        ]);
        out
    }

    fn denses_mut(&mut self) -> Vec<&mut Dense> {
        let mut out: Vec<&mut Dense> = self.encoder.layers.iter_mut().collect();
        out.push(&mut self.semantic);
        out.push(&mut self.point_box);
        out.push(&mut self.mask_features);
        for b in &mut self.blocks {
            out.extend(b.mlp.layers.iter_mut());
        }
        out.push(&mut self.heads.class);
        out.push(&mut self.heads.bbox);
        out.push(&mut self.heads.kernel);
        out.push(&mut self.heads.quality);
        out
    }

    pub fn num_params(&self) -> usize {
        self.denses().iter().map(|d| d.num_params()).sum()
    }

    /// All parameters in a fixed order: encoder, pointwise heads, blocks,
    /// candidate heads; weights row-major before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for d in self.denses() {
            out.extend(d.params());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        crate::error::check_len(self.num_params(), values.len())?;
        let mut it = values.iter();
        for d in self.denses_mut() {
            for p in d.params_mut() {
                *p = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.denses().iter().all(|d| d.params().all(|v| v.is_finite()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&self.config)?;
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let flat = self.flatten();
        w.write_all(&(flat.len() as u64).to_le_bytes())?;
        for v in flat {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format(format!("bad model magic {magic:?}")));
        }
        let version = read_u32(&mut r, "version")?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {version}, expected {MODEL_VERSION}"
            )));
        }
        let header_len = read_u32(&mut r, "header length")? as usize;
        let mut header = vec![0u8; header_len];
        read_exact(&mut r, &mut header, "header")?;
        let config: ModelConfig = serde_json::from_slice(&header)?;
        let mut params = ModelParams::zeros(config)?;
        let mut count = [0u8; 8];
        read_exact(&mut r, &mut count, "parameter count")?;
        let count = u64::from_le_bytes(count) as usize;
        if count != params.num_params() {
            return Err(Error::Format(format!(
                "header implies {} parameters, file declares {count}",
                params.num_params()
            )));
        }
        let mut values = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            read_exact(&mut r, &mut buf, "parameters")?;
            values.push(f64::from_le_bytes(buf));
        }
        if r.read(&mut buf[..1])? != 0 {
            return Err(Error::Format("trailing bytes after model parameters".into()));
        }
        params.set_flat(&values)?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        ModelParams::read_from(std::io::BufReader::new(file))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated file while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
