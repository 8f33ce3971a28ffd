//! Full encoder/decoder assembly.
//!
//! Encoder: three conv stages (two conv-BN-ReLU each, then 2x max pool) at
//! /2, /4, /8; a stride-2 MAN stage at /16; a stride-1 MAN bottleneck at /16.
//! Decoder: a stride-1 MAN stage back to `d4` fused with the /16 skip, then
//! three conv stages that upsample and fuse with the /8, /4, /2 skips, and a
//! final upsample plus 1x1 head producing logits at full resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kan::SplineGrid;
use crate::layers::{Conv2d, ConvBnRelu};
use crate::man::{validate_kernels, ManStage, ManStageConfig};
use crate::pagf::{Pagf, PagfMode};
use crate::params::{BufferStore, Builder, ParamGroup, ParameterStore, Session};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub embed_dims: [usize; 5],
    /// Encoder MAN, bottleneck MAN and decoder MAN depths.
    pub man_depths: [usize; 3],
    pub msab_kernels: Vec<usize>,
    /// `false` drops the MSAB branch (and `w1`) from every MAN stage.
    pub use_msab: bool,
    pub grid_size: usize,
    pub spline_order: usize,
    pub grid_range: (f64, f64),
    pub pagf_mode: PagfMode,
    pub drop_path: f64,
    pub num_classes: usize,
    pub input_channels: usize,
}

impl NetworkConfig {
    pub fn paper() -> Self {
        Self {
            embed_dims: [32, 64, 256, 320, 512],
            ..Self::desk()
        }
    }

    /// Scaled-down dims for single-core experiments.
    pub fn desk() -> Self {
        Self {
            embed_dims: [8, 16, 32, 40, 64],
            man_depths: [3, 3, 3],
            msab_kernels: vec![1, 3, 5],
            use_msab: true,
            grid_size: 5,
            spline_order: 3,
            grid_range: (-1.0, 1.0),
            pagf_mode: PagfMode::Full,
            drop_path: 0.0,
            num_classes: 1,
            input_channels: 3,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (expected paper or desk)"))),
        }
    }

    pub fn grid(&self) -> Result<SplineGrid> {
        SplineGrid::new(self.grid_size, self.spline_order, self.grid_range.0, self.grid_range.1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dims.contains(&0) {
            return Err(Error::Config("embed_dims must all be positive".into()));
        }
        if self.man_depths.contains(&0) {
            return Err(Error::Config("man_depths must all be at least 1".into()));
        }
        if self.use_msab {
            validate_kernels(&self.msab_kernels)?;
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config(format!("drop_path {} outside [0, 1)", self.drop_path)));
        }
        if self.num_classes == 0 || self.input_channels == 0 {
            return Err(Error::Config("num_classes and input_channels must be positive".into()));
        }
        self.grid()?;
        Ok(())
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub conv: ConvBnRelu,
    pub fuse: Pagf,
}

#[derive(Clone, Debug)]
pub struct UmanNetwork {
    pub encoder: Vec<[ConvBnRelu; 2]>,
    pub enc_man: ManStage,
    pub bottleneck: ManStage,
    pub dec_man: ManStage,
    pub dec_man_fuse: Pagf,
    pub decoder: Vec<DecoderStage>,
    pub head: Conv2d,
}

/// Logits plus the five encoder feature maps (shallow to deep).
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub encoder: Vec<Var>,
}

impl UmanNetwork {
    pub fn new(b: &mut Builder<'_>, cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dims;
        let grid = cfg.grid()?;
        let kernels = cfg.use_msab.then(|| cfg.msab_kernels.clone());
        let man_cfg = |c_in, dim, depth, stride| ManStageConfig {
            c_in,
            dim,
            depth,
            stride,
            kernels: kernels.clone(),
            grid: grid.clone(),
            drop_path: cfg.drop_path,
        };

        let mut encoder = Vec::with_capacity(3);
        let mut c_in = cfg.input_channels;
        for (i, &c) in d[..3].iter().enumerate() {
            let stage = b.scope(&format!("enc{}", i + 1), |b| {
                Ok::<_, Error>([ConvBnRelu::new(b, "0", c_in, c, 3)?, ConvBnRelu::new(b, "1", c, c, 3)?])
            })?;
            encoder.push(stage);
            c_in = c;
        }
        let enc_man = ManStage::new(b, "enc4", &man_cfg(d[2], d[3], cfg.man_depths[0], 2))?;
        let bottleneck = ManStage::new(b, "bottleneck", &man_cfg(d[3], d[4], cfg.man_depths[1], 1))?;
        let dec_man = ManStage::new(b, "dec4", &man_cfg(d[4], d[3], cfg.man_depths[2], 1))?;
        let dec_man_fuse = Pagf::new(b, "dec4.pagf", d[3], cfg.pagf_mode)?;

        let mut decoder = Vec::with_capacity(3);
        for i in (0..3).rev() {
            let stage = b.scope(&format!("dec{}", i + 1), |b| {
                Ok::<_, Error>(DecoderStage {
                    conv: ConvBnRelu::new(b, "conv", d[i + 1], d[i], 3)?,
                    fuse: Pagf::new(b, "pagf", d[i], cfg.pagf_mode)?,
                })
            })?;
            decoder.push(stage);
        }
        let head = b.in_group(ParamGroup::Head, |b| {
            Conv2d::new(b, "head", d[0], cfg.num_classes, 1, 1, true)
        })?;
        Ok(Self {
            encoder,
            enc_man,
            bottleneck,
            dec_man,
            dec_man_fuse,
            decoder,
            head,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_full(s, x)?.logits)
    }

    pub fn forward_full(&self, s: &mut Session<'_>, x: Var) -> Result<ForwardOutput> {
        let sh = s.graph.shape(x).to_vec();
        if sh.len() != 4 || sh[2] % 16 != 0 || sh[3] % 16 != 0 || sh[2] == 0 || sh[3] == 0 {
            return Err(Error::Dimension(format!(
                "network input must be [N, C, H, W] with H, W positive multiples of 16, got {sh:?}"
            )));
        }
        let mut skips = Vec::with_capacity(5);
        let mut h = x;
        for [a, b] in &self.encoder {
            h = a.forward(s, h)?;
            h = b.forward(s, h)?;
            h = s.graph.max_pool2x(h)?;
            skips.push(h);
        }
        let e4 = self.enc_man.forward(s, h)?;
        skips.push(e4);
        let bott = self.bottleneck.forward(s, e4)?;
        skips.push(bott);

        let d = self.dec_man.forward(s, bott)?;
        let mut h = self.dec_man_fuse.forward(s, d, e4)?;
        for (stage, skip) in self.decoder.iter().zip(skips[..3].iter().rev()) {
            h = stage.conv.forward(s, h)?;
            h = s.graph.upsample_bilinear2x(h)?;
            h = stage.fuse.forward(s, h, *skip)?;
        }
        let h = s.graph.upsample_bilinear2x(h)?;
        let logits = self.head.forward(s, h)?;
        Ok(ForwardOutput { logits, encoder: skips })
    }
}

/// A network together with its parameters and running statistics.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: NetworkConfig,
    pub net: UmanNetwork,
    pub params: ParameterStore,
    pub buffers: BufferStore,
}

impl Model {
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut params = ParameterStore::new();
        let mut buffers = BufferStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = UmanNetwork::new(&mut Builder::new(&mut params, &mut buffers, &mut rng), config)?;
        Ok(Self {
            config: config.clone(),
            net,
            params,
            buffers,
        })
    }

    /// Forward pass without gradient tracking. In training mode BN running
    /// statistics are updated.
    pub fn predict(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut s = Session::new(&self.params, &mut self.buffers, training, false, 0);
        let v = s.graph.constant(x.clone());
        let y = self.net.forward(&mut s, v)?;
        Ok(s.graph.value(y).clone())
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count_parameters()
    }
}
