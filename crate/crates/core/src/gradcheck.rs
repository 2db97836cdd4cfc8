//! Central finite-difference checks of every differentiable operator and of
//! the composite modules built from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::netops::{NetError, ParamStore, Tape, Tensor, Var};

/// Perturbation for central differences.
pub const STEP: f64 = 1e-5;
/// Pass threshold on `|analytic − numeric| / max(1, |numeric|)`.
pub const TOLERANCE: f64 = 1e-4;

/// Outcome for one operator across all of its random instances.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub op: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

/// How many coordinates of each tensor are probed, and which fault (if any)
/// is injected into the tape.
#[derive(Debug, Clone, Default)]
pub struct CheckOptions {
    pub max_coords: Option<usize>,
    pub fault: Option<String>,
}

/// Maximum relative error between the tape's gradients and central
/// differences for a scalar probe `Σ r ⊙ build(...)` with fixed random `r`.
///
/// Gradients are checked with respect to every input tensor and every
/// parameter in `store`.
pub fn max_relative_error<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    build: F,
    opts: &CheckOptions,
    rng: &mut ChaCha8Rng,
) -> Result<f64, NetError>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var, NetError>,
{
    let probe_seed: u64 = rng.random();
    let probe = |store: &ParamStore, inputs: &[Tensor], fault: Option<&str>| {
        let mut tape = Tape::new();
        if let Some(f) = fault {
            tape.inject_gradient_fault(f);
        }
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&mut tape, store, &vars)?;
        let n = tape.value(out).len();
        let mut prng = ChaCha8Rng::seed_from_u64(probe_seed);
        let weights: Vec<f64> = (0..n).map(|_| prng.random_range(-1.0..1.0)).collect();
        let loss = tape.weighted_sum(out, weights)?;
        Ok::<_, NetError>((tape, vars, loss))
    };

    let (mut tape, vars, loss) = probe(store, inputs, opts.fault.as_deref())?;
    let grads = tape.backward(loss)?;
    let loss_at = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64, NetError> {
        let (tape, _, loss) = probe(store, inputs, None)?;
        Ok(tape.value(loss).item())
    };

    let mut worst = 0.0f64;
    let mut record = |analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * STEP);
        let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(rel);
    };

    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for idx in coords(inputs[k].len(), opts.max_coords, rng) {
            let mut shifted = inputs.to_vec();
            shifted[k].data_mut()[idx] += STEP;
            let plus = loss_at(store, &shifted)?;
            shifted[k].data_mut()[idx] -= 2.0 * STEP;
            let minus = loss_at(store, &shifted)?;
            record(analytic.data()[idx], plus, minus);
        }
    }

    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let Some(analytic) = grads.param(&name) else {
            // Never read by the build; its gradient is identically zero.
            continue;
        };
        let len = analytic.len();
        for idx in coords(len, opts.max_coords, rng) {
            let mut shifted = store.clone();
            shifted.value_mut(&name).expect("present").data_mut()[idx] += STEP;
            let plus = loss_at(&shifted, inputs)?;
            shifted.value_mut(&name).expect("present").data_mut()[idx] -= 2.0 * STEP;
            let minus = loss_at(&shifted, inputs)?;
            record(analytic.data()[idx], plus, minus);
        }
    }
    Ok(worst)
}

fn coords(len: usize, max: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|_| rng.random_range(0..len)).collect(),
        _ => (0..len).collect(),
    }
}

/// Builds the checked expression; the trailing slice holds constants that
/// are not differentiated (targets, masks).
type BuildFn = Box<dyn Fn(&mut Tape, &ParamStore, &[Var], &[Tensor]) -> Result<Var, NetError> + Send + Sync>;
type InstanceFn = Box<dyn Fn(&mut ChaCha8Rng) -> Instance + Send + Sync>;

struct Instance {
    store: ParamStore,
    inputs: Vec<Tensor>,
    constants: Vec<Tensor>,
}

impl Instance {
    fn new(store: ParamStore, inputs: Vec<Tensor>) -> Self {
        Self {
            store,
            inputs,
            constants: Vec::new(),
        }
    }
}

/// One entry of the suite: how to draw an instance and what to build on it.
struct Case {
    op: &'static str,
    instance: InstanceFn,
    build: BuildFn,
    max_coords: Option<usize>,
}

/// Random instances drawn per operator.
pub const INSTANCES: usize = 10;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Inputs drawn from `±[0.05, 1.05)`, keeping relu away from its kink.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (0.05 + v.abs());
    }
    t
}

fn seeded(rng: &mut ChaCha8Rng) -> u64 {
    rng.random()
}

fn inputs_case(
    op: &'static str,
    shapes: &'static [&'static [usize]],
    keep_from_zero: bool,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var, NetError> + Send + Sync + 'static,
) -> Case {
    Case {
        op,
        instance: Box::new(move |rng| {
            let draw = if keep_from_zero { away_from_zero } else { uniform };
            Instance::new(ParamStore::new(), shapes.iter().map(|s| draw(s, rng)).collect())
        }),
        build: Box::new(move |tape, _, v, _| build(tape, v)),
        max_coords: None,
    }
}

fn primitive_cases() -> Vec<Case> {
    vec![
        inputs_case("conv2d", &[&[2, 5, 5], &[3, 2, 3, 3], &[3]], false, |t, v| {
            let a = t.conv2d(v[0], v[1], v[2], 1)?;
            let s = t.conv2d(v[0], v[1], v[2], 2)?;
            let a = t.reshape(a, &[75])?;
            let s = t.reshape(s, &[27])?;
            let both = t.concat_channels(&[a, s])?;
            Ok(both)
        }),
        inputs_case("conv1d", &[&[3, 6], &[2, 3, 3], &[2]], false, |t, v| t.conv1d(v[0], v[1], v[2])),
        inputs_case("fully_connected", &[&[5], &[3, 5], &[3]], false, |t, v| {
            t.fully_connected(v[0], v[1], v[2])
        }),
        inputs_case("relu", &[&[3, 4]], true, |t, v| Ok(t.relu(v[0]))),
        inputs_case("sigmoid", &[&[3, 4]], false, |t, v| Ok(t.sigmoid(v[0]))),
        inputs_case("matmul", &[&[3, 4], &[4, 2]], false, |t, v| t.matmul(v[0], v[1])),
        inputs_case("transpose", &[&[3, 4]], false, |t, v| t.transpose(v[0])),
        inputs_case("reshape", &[&[2, 3, 2]], false, |t, v| t.reshape(v[0], &[3, 4])),
        inputs_case("planar", &[&[2, 3, 4]], false, |t, v| t.planar(v[0])),
        inputs_case("unplanar", &[&[6, 2]], false, |t, v| t.unplanar(v[0], 2, 3)),
        inputs_case("concat_channels", &[&[2, 2, 3], &[1, 2, 3]], false, |t, v| {
            t.concat_channels(&[v[0], v[1]])
        }),
        inputs_case("slice_channels", &[&[4, 2, 2]], false, |t, v| t.slice_channels(v[0], 1, 2)),
        inputs_case("scale_channels", &[&[3, 2, 2], &[3]], false, |t, v| t.scale_channels(v[0], v[1])),
        inputs_case("add", &[&[2, 3], &[2, 3]], false, |t, v| t.add(v[0], v[1])),
        inputs_case("scale", &[&[2, 3]], false, |t, v| Ok(t.scale(v[0], -1.7))),
        inputs_case("sum", &[&[2, 3]], false, |t, v| Ok(t.sum(v[0]))),
        inputs_case("weighted_sum", &[&[5]], false, |t, v| {
            t.weighted_sum(v[0], vec![0.5, -1.0, 2.0, 0.0, 3.0])
        }),
    ]
}

fn composite_cases() -> Vec<Case> {
    use crate::frame::{backbone, build_params, forward_frame, head_apply, FrameConfig, HeadBlock, ModelDims};
    use crate::geometry::GridSpec;
    use crate::loss::{focal_loss, masked_l1, FocalHyper};

    let dims = ModelDims {
        num_object_classes: 2,
        num_verbs: 2,
        grid: GridSpec::new(4, 4, 2),
        image_size: 8,
    };
    let frame = FrameConfig {
        hidden_dim: 4,
        backbone_dim: 4,
        iim_hidden: 3,
        ..FrameConfig::full()
    };
    let block = HeadBlock {
        name: "g",
        in_dim: 3,
        hidden_dim: 4,
        out_dim: 2,
    };

    let frame_b = frame.clone();
    let frame_f = frame.clone();
    let frame_fb = frame.clone();
    let head_block = block.clone();
    vec![
        Case {
            op: "focal_loss",
            instance: Box::new(|rng| {
                let gt: Vec<f64> = (0..18)
                    .map(|i| if i % 7 == 0 { 1.0 } else { rng.random_range(0.0..0.99) })
                    .collect();
                let gt = Tensor::new(&[2, 3, 3], gt).expect("18 values");
                Instance {
                    store: ParamStore::new(),
                    inputs: vec![Tensor::uniform(&[2, 3, 3], -3.0, 3.0, rng)],
                    constants: vec![gt],
                }
            }),
            build: Box::new(|tape, _, v, c| {
                let p = tape.sigmoid(v[0]);
                focal_loss(tape, p, &c[0], &FocalHyper::default())
            }),
            max_coords: None,
        },
        Case {
            op: "masked_l1",
            instance: Box::new(|rng| {
                let gt = uniform(&[2, 3, 3], rng);
                let mut pred = gt.clone();
                let shift = away_from_zero(&[2, 3, 3], rng);
                for (p, s) in pred.data_mut().iter_mut().zip(shift.data()) {
                    *p += s;
                }
                let mask = Tensor::new(&[1, 3, 3], (0..9).map(|i| f64::from(i % 2 == 0)).collect())
                    .expect("9 values");
                Instance {
                    store: ParamStore::new(),
                    inputs: vec![pred],
                    constants: vec![gt, mask],
                }
            }),
            build: Box::new(|tape, _, v, c| masked_l1(tape, v[0], &c[0], &c[1])),
            max_coords: None,
        },
        Case {
            op: "head_apply",
            instance: Box::new(move |rng| {
                let mut store = ParamStore::new();
                block.init(&mut store, seeded(rng), None).expect("fresh store");
                Instance::new(store, vec![uniform(&[3, 4, 4], rng)])
            }),
            build: Box::new(move |tape, store, v, _| head_apply(tape, store, &head_block, v[0])),
            max_coords: None,
        },
        Case {
            op: "backbone",
            instance: Box::new(move |rng| {
                let store = build_params(&frame_b, &dims, seeded(rng)).expect("valid config");
                Instance::new(store, vec![Tensor::uniform(&[3, 8, 8], 0.0, 1.0, rng)])
            }),
            build: Box::new(move |tape, store, v, _| backbone(tape, store, &dims, v[0])),
            max_coords: Some(24),
        },
        Case {
            op: "iim_forward",
            instance: Box::new(|rng| {
                let mut store = ParamStore::new();
                crate::iim::init_params(&mut store, seeded(rng), 16, 3, 2).expect("fresh store");
                Instance::new(store, vec![uniform(&[3, 4, 4], rng)])
            }),
            build: Box::new(|tape, store, v, _| Ok(crate::iim::iim_forward(tape, store, v[0])?.0)),
            max_coords: None,
        },
        Case {
            op: "cpm_forward",
            instance: Box::new(|rng| {
                let mut store = ParamStore::new();
                crate::cpm::init_params(&mut store, seeded(rng), 4).expect("fresh store");
                Instance::new(store, vec![uniform(&[4, 3, 3], rng)])
            }),
            build: Box::new(|tape, store, v, _| Ok(crate::cpm::cpm_forward(tape, store, v[0])?.f_ad)),
            max_coords: None,
        },
        Case {
            op: "forward_frame",
            instance: Box::new(move |rng| {
                let store = build_params(&frame_f, &dims, seeded(rng)).expect("valid config");
                Instance::new(store, vec![uniform(&[4, 4, 4], rng)])
            }),
            build: Box::new(move |tape, store, v, _| {
                let o = forward_frame(tape, store, &frame_fb, &dims, v[0])?;
                tape.concat_channels(&[o.hm_ho, o.hm_i, o.f_dh, o.f_do, o.f_wh, o.f_off])
            }),
            max_coords: Some(24),
        },
    ]
}

/// Runs every operator and composite for [`INSTANCES`] random instances.
/// Rows come back in a fixed order regardless of the executor.
pub fn run_suite(seed: u64, fault: Option<&str>, exec: &crate::par::Executor) -> Vec<CheckRow> {
    let cases: Vec<Case> = primitive_cases().into_iter().chain(composite_cases()).collect();
    exec.map_range(cases.len(), |k| {
        let case = &cases[k];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let opts = CheckOptions {
            max_coords: case.max_coords,
            fault: fault.map(str::to_string),
        };
        let mut worst = 0.0f64;
        for _ in 0..INSTANCES {
            let inst = (case.instance)(&mut rng);
            let build = |t: &mut Tape, s: &ParamStore, v: &[Var]| (case.build)(t, s, v, &inst.constants);
            let err = max_relative_error(&inst.store, &inst.inputs, build, &opts, &mut rng)
                .unwrap_or(f64::INFINITY);
            worst = worst.max(err);
        }
        CheckRow {
            op: case.op.to_string(),
            instances: INSTANCES,
            max_rel_error: worst,
        }
    })
}

/// Fixed-width table, one row per operator.
pub fn format_table(rows: &[CheckRow]) -> String {
    let mut out = format!("{:<18} {:>9} {:>14}  result\n", "op", "instances", "max_rel_error");
    for r in rows {
        out.push_str(&format!(
            "{:<18} {:>9} {:>14.3e}  {}\n",
            r.op,
            r.instances,
            r.max_rel_error,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    out
}
