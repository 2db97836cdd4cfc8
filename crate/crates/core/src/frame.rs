//! The relation-aware frame: a small strided backbone, six head blocks, and
//! the wiring between them for the baseline, Part A and Part B variants with
//! IIM/CPM attached.

use serde::{Deserialize, Serialize};

use crate::cpm::{self, CpmOutputs};
use crate::geometry::GridSpec;
use crate::iim;
use crate::netops::{NetError, ParamStore, Tape, Tensor, Var};
use crate::synthdata::{ConfigError, DataConfig, RasterImage};

/// Bias of the final heatmap convolutions, `sigmoid(−2.19) ≈ 0.1`.
pub const HEATMAP_BIAS: f64 = -2.19;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameConfig {
    /// Interaction head reads the instance head output.
    pub relation_part_a: bool,
    /// Displacement heads read all point-head outputs.
    pub relation_part_b: bool,
    pub use_iim: bool,
    pub use_cpm: bool,
    pub hidden_dim: usize,
    pub backbone_dim: usize,
    pub iim_hidden: usize,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl FrameConfig {
    pub fn baseline() -> Self {
        Self {
            relation_part_a: false,
            relation_part_b: false,
            use_iim: false,
            use_cpm: false,
            hidden_dim: 64,
            backbone_dim: 32,
            iim_hidden: 32,
        }
    }

    pub fn full() -> Self {
        Self::wiring(true, true, true, true)
    }

    pub fn wiring(part_a: bool, part_b: bool, use_iim: bool, use_cpm: bool) -> Self {
        Self {
            relation_part_a: part_a,
            relation_part_b: part_b,
            use_iim,
            use_cpm,
            ..Self::baseline()
        }
    }

    /// Short label such as `A+B+IIM+CPM` or `baseline`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.relation_part_a, "A"),
            (self.relation_part_b, "B"),
            (self.use_iim, "IIM"),
            (self.use_cpm, "CPM"),
        ]
        .into_iter()
        .filter_map(|(on, name)| on.then_some(name))
        .collect();
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.use_iim && !self.relation_part_a {
            return Err(ConfigError::new("frame.use_iim", "requires frame.relation_part_a"));
        }
        if self.use_cpm && !self.relation_part_b {
            return Err(ConfigError::new("frame.use_cpm", "requires frame.relation_part_b"));
        }
        for (field, v) in [
            ("frame.hidden_dim", self.hidden_dim),
            ("frame.backbone_dim", self.backbone_dim),
            ("frame.iim_hidden", self.iim_hidden),
        ] {
            if v == 0 {
                return Err(ConfigError::new(field, "must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Sizes the network needs from the data side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub num_object_classes: usize,
    pub num_verbs: usize,
    pub grid: GridSpec,
    pub image_size: usize,
}

impl From<&DataConfig> for ModelDims {
    fn from(c: &DataConfig) -> Self {
        Self {
            num_object_classes: c.num_object_classes,
            num_verbs: c.num_verbs,
            grid: c.grid,
            image_size: c.image_size,
        }
    }
}

impl ModelDims {
    pub fn point_channels(&self) -> usize {
        1 + self.num_object_classes + self.num_verbs
    }

    /// Strides of the three backbone stages; their product is the grid stride.
    pub fn backbone_strides(&self) -> Result<[usize; 3], ConfigError> {
        match self.grid.stride {
            1 => Ok([1, 1, 1]),
            2 => Ok([2, 1, 1]),
            4 => Ok([2, 2, 1]),
            8 => Ok([2, 2, 2]),
            s => Err(ConfigError::new(
                "data.grid.stride",
                format!("{s} is not one of 1, 2, 4, 8"),
            )),
        }
    }
}

/// `conv_b(relu(conv_a(x)))` with a 3×3 then a 1×1 convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadBlock {
    pub name: &'static str,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl HeadBlock {
    fn key(&self, part: &str) -> String {
        format!("head.{}.{part}", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64, final_bias: Option<f64>) -> Result<(), NetError> {
        let fan_a = self.in_dim * 9;
        store.init_uniform(seed, &self.key("a.w"), &[self.hidden_dim, self.in_dim, 3, 3], fan_a)?;
        store.init_uniform(seed, &self.key("a.b"), &[self.hidden_dim], fan_a)?;
        store.init_uniform(seed, &self.key("b.w"), &[self.out_dim, self.hidden_dim, 1, 1], self.hidden_dim)?;
        match final_bias {
            Some(b) => store.insert(&self.key("b.b"), Tensor::full(&[self.out_dim], b)),
            None => store.init_uniform(seed, &self.key("b.b"), &[self.out_dim], self.hidden_dim),
        }
    }
}

pub fn head_apply(tape: &mut Tape, store: &ParamStore, block: &HeadBlock, x: Var) -> Result<Var, NetError> {
    let c = tape.shape(x).first().copied().unwrap_or(0);
    if c != block.in_dim {
        return Err(NetError::Shape(format!(
            "head {}: expected {} input channels, got {c}",
            block.name, block.in_dim
        )));
    }
    let (wa, ba) = (tape.param(store, &block.key("a.w"))?, tape.param(store, &block.key("a.b"))?);
    let (wb, bb) = (tape.param(store, &block.key("b.w"))?, tape.param(store, &block.key("b.b"))?);
    let h = tape.conv2d(x, wa, ba, 1)?;
    let h = tape.relu(h);
    tape.conv2d(h, wb, bb, 1)
}

/// The six head blocks for a wiring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Heads {
    pub ho: HeadBlock,
    pub i: HeadBlock,
    pub dh: HeadBlock,
    pub d_o: HeadBlock,
    pub wh: HeadBlock,
    pub off: HeadBlock,
}

impl Heads {
    pub fn new(cfg: &FrameConfig, dims: &ModelDims) -> Self {
        let d = cfg.backbone_dim;
        let k1 = 1 + dims.num_object_classes;
        let c = dims.point_channels();
        let i_in = if cfg.relation_part_a { k1 } else { d };
        let disp_in = match (cfg.relation_part_b, cfg.use_cpm) {
            (false, _) => d,
            (true, false) => c,
            (true, true) => 2 * c,
        };
        let block = |name, in_dim, out_dim| HeadBlock {
            name,
            in_dim,
            hidden_dim: cfg.hidden_dim,
            out_dim,
        };
        Self {
            ho: block("ho", d, k1),
            i: block("i", i_in, dims.num_verbs),
            dh: block("dh", disp_in, 2),
            d_o: block("do", disp_in, 2),
            wh: block("wh", d, 2),
            off: block("off", d, 2),
        }
    }
}

fn backbone_widths(d: usize) -> [usize; 3] {
    [(d / 2).max(1), d, d]
}

/// All parameters of a wiring, initialized from `seed`.
pub fn build_params(cfg: &FrameConfig, dims: &ModelDims, seed: u64) -> Result<ParamStore, ConfigError> {
    cfg.validate()?;
    dims.backbone_strides()?;
    let mut store = ParamStore::new();
    let mut c_in = RasterImage::CHANNELS;
    for (s, &width) in backbone_widths(cfg.backbone_dim).iter().enumerate() {
        let fan = c_in * 9;
        store
            .init_uniform(seed, &format!("backbone.s{}.w", s + 1), &[width, c_in, 3, 3], fan)
            .and_then(|_| store.init_uniform(seed, &format!("backbone.s{}.b", s + 1), &[width], fan))
            .expect("fresh store");
        c_in = width;
    }
    let heads = Heads::new(cfg, dims);
    for (block, bias) in [
        (&heads.ho, Some(HEATMAP_BIAS)),
        (&heads.i, Some(HEATMAP_BIAS)),
        (&heads.dh, None),
        (&heads.d_o, None),
        (&heads.wh, None),
        (&heads.off, None),
    ] {
        block.init(&mut store, seed, bias).expect("fresh store");
    }
    if cfg.use_iim {
        iim::init_params(
            &mut store,
            seed,
            dims.grid.cells(),
            cfg.iim_hidden,
            dims.num_object_classes,
        )
        .expect("fresh store");
    }
    if cfg.use_cpm {
        cpm::init_params(&mut store, seed, dims.point_channels()).expect("fresh store");
    }
    Ok(store)
}

/// Three conv+relu stages from the `3×S×S` image to `D×H×W`.
pub fn backbone(tape: &mut Tape, store: &ParamStore, dims: &ModelDims, image: Var) -> Result<Var, NetError> {
    let s = tape.shape(image);
    if s != [RasterImage::CHANNELS, dims.image_size, dims.image_size] {
        return Err(NetError::Shape(format!(
            "backbone: image {s:?} does not match {}×{}×{}",
            RasterImage::CHANNELS,
            dims.image_size,
            dims.image_size
        )));
    }
    let strides = dims
        .backbone_strides()
        .map_err(|e| NetError::Shape(e.to_string()))?;
    let mut x = image;
    for (i, stride) in strides.into_iter().enumerate() {
        let w = tape.param(store, &format!("backbone.s{}.w", i + 1))?;
        let b = tape.param(store, &format!("backbone.s{}.b", i + 1))?;
        x = tape.conv2d(x, w, b, stride)?;
        x = tape.relu(x);
    }
    Ok(x)
}

/// Every named feature of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    pub f_dla: Var,
    pub f_ho: Var,
    /// `f_ho` after IIM, or `f_ho` itself.
    pub f_ho_prime: Var,
    pub f_i: Var,
    pub f_dh: Var,
    pub f_do: Var,
    pub f_wh: Var,
    pub f_off: Var,
    /// `concat(f_ho', f_i)` on Part B wirings.
    pub f_p: Option<Var>,
    pub disp_input: Var,
    pub beta: Option<Var>,
    pub cpm: Option<CpmOutputs>,
    /// `sigmoid(f_ho)`: human channel then `K` object channels.
    pub hm_ho: Var,
    pub hm_i: Var,
}

/// Wires the heads on top of `f_dla`.
pub fn forward_frame(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &FrameConfig,
    dims: &ModelDims,
    f_dla: Var,
) -> Result<HeadOutputs, NetError> {
    cfg.validate().map_err(|e| NetError::Shape(e.to_string()))?;
    let heads = Heads::new(cfg, dims);
    let f_ho = head_apply(tape, store, &heads.ho, f_dla)?;
    let (f_ho_prime, beta) = if cfg.use_iim {
        let (out, beta) = iim::iim_forward(tape, store, f_ho)?;
        (out, Some(beta))
    } else {
        (f_ho, None)
    };
    let i_input = if cfg.relation_part_a { f_ho_prime } else { f_dla };
    let f_i = head_apply(tape, store, &heads.i, i_input)?;

    let (f_p, cpm_out, disp_input) = if cfg.relation_part_b {
        let f_p = tape.concat_channels(&[f_ho_prime, f_i])?;
        if cfg.use_cpm {
            let out = cpm::cpm_forward(tape, store, f_p)?;
            (Some(f_p), Some(out), out.fused)
        } else {
            (Some(f_p), None, f_p)
        }
    } else {
        (None, None, f_dla)
    };
    let f_dh = head_apply(tape, store, &heads.dh, disp_input)?;
    let f_do = head_apply(tape, store, &heads.d_o, disp_input)?;
    let f_wh = head_apply(tape, store, &heads.wh, f_dla)?;
    let f_off = head_apply(tape, store, &heads.off, f_dla)?;
    let hm_ho = tape.sigmoid(f_ho);
    let hm_i = tape.sigmoid(f_i);
    Ok(HeadOutputs {
        f_dla,
        f_ho,
        f_ho_prime,
        f_i,
        f_dh,
        f_do,
        f_wh,
        f_off,
        f_p,
        disp_input,
        beta,
        cpm: cpm_out,
        hm_ho,
        hm_i,
    })
}

/// Backbone plus heads from an image tensor.
pub fn forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &FrameConfig,
    dims: &ModelDims,
    image: &Tensor,
) -> Result<HeadOutputs, NetError> {
    let x = tape.input(image.clone());
    let f_dla = backbone(tape, store, dims, x)?;
    forward_frame(tape, store, cfg, dims, f_dla)
}
