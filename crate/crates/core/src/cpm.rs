//! Correlation Parsing: a dynamic adjacency over the `C = 1+K+N` point
//! channels, refined by channel mixing and used to re-weight a projection of
//! the features.
//!
//! ```text
//! A   = planar(θ(X))ᵀ · planar(φ(X))                (C×C)
//! t   = conv1d(A, mix1)                              rows of A as channels
//! A'  = conv1d(t ⊕ A, mix2)
//! Y   = planar(g(X)) · sigmoid(A')                   (L×C)
//! f_ad = reshape(Y) to C×H×W
//! ```
//!
//! Both 1-D convolutions use kernel size 1, so each is a channel mix over the
//! rows of `A`. The written double transpose around the first convolution is
//! the identity and is not materialized.

use crate::netops::{NetError, ParamStore, Tape, Var};

const PROJECTIONS: [&str; 3] = ["theta", "phi", "g"];
const MIXES: [&str; 2] = ["mix1", "mix2"];

fn w(name: &str) -> String {
    format!("cpm.{name}.w")
}

fn b(name: &str) -> String {
    format!("cpm.{name}.b")
}

/// Registers θ, φ, g (1×1 conv, C→C) and the two kernel-1 mixes (C→C).
pub fn init_params(store: &mut ParamStore, seed: u64, channels: usize) -> Result<(), NetError> {
    for p in PROJECTIONS {
        store.init_uniform(seed, &w(p), &[channels, channels, 1, 1], channels)?;
        store.init_uniform(seed, &b(p), &[channels], channels)?;
    }
    for m in MIXES {
        store.init_uniform(seed, &w(m), &[channels, channels, 1], channels)?;
        store.init_uniform(seed, &b(m), &[channels], channels)?;
    }
    Ok(())
}

fn project(tape: &mut Tape, store: &ParamStore, x: Var, name: &str) -> Result<Var, NetError> {
    let (wv, bv) = (tape.param(store, &w(name))?, tape.param(store, &b(name))?);
    tape.conv2d(x, wv, bv, 1)
}

fn check_channels(tape: &Tape, store: &ParamStore, x: Var) -> Result<(), NetError> {
    let expected = store
        .value(&w("theta"))
        .ok_or_else(|| NetError::MissingParam(w("theta")))?
        .shape()[0];
    let got = tape.shape(x);
    if got.len() != 3 || got[0] != expected {
        return Err(NetError::Shape(format!(
            "cpm: expected {expected}×H×W point features, got {got:?}"
        )));
    }
    Ok(())
}

/// `A = planar(θ(f_p))ᵀ · planar(φ(f_p))`.
pub fn project_adjacency(tape: &mut Tape, store: &ParamStore, f_p: Var) -> Result<Var, NetError> {
    check_channels(tape, store, f_p)?;
    let theta = project(tape, store, f_p, "theta")?;
    let phi = project(tape, store, f_p, "phi")?;
    let theta_p = tape.planar(theta)?;
    let phi_p = tape.planar(phi)?;
    let theta_t = tape.transpose(theta_p)?;
    tape.matmul(theta_t, phi_p)
}

/// `A' = conv1d(conv1d(A, mix1) ⊕ A, mix2)`.
pub fn spread_messages(tape: &mut Tape, store: &ParamStore, a: Var) -> Result<Var, NetError> {
    let s = tape.shape(a);
    if s.len() != 2 || s[0] != s[1] {
        return Err(NetError::Shape(format!(
            "spread_messages: adjacency must be square, got {s:?}"
        )));
    }
    let (w1, b1) = (tape.param(store, &w("mix1"))?, tape.param(store, &b("mix1"))?);
    let (w2, b2) = (tape.param(store, &w("mix2"))?, tape.param(store, &b("mix2"))?);
    let t = tape.conv1d(a, w1, b1)?;
    let merged = tape.add(t, a)?;
    tape.conv1d(merged, w2, b2)
}

/// `f_ad = reshape(planar(g(f_p)) · sigmoid(A'))`.
pub fn reverse_project(
    tape: &mut Tape,
    store: &ParamStore,
    a_prime: Var,
    f_p: Var,
) -> Result<Var, NetError> {
    check_channels(tape, store, f_p)?;
    let c = tape.shape(f_p)[0];
    if tape.shape(a_prime) != [c, c] {
        return Err(NetError::Shape(format!(
            "reverse_project: adjacency {:?} does not match {c} channels",
            tape.shape(a_prime)
        )));
    }
    let (h, wd) = (tape.shape(f_p)[1], tape.shape(f_p)[2]);
    let g = project(tape, store, f_p, "g")?;
    let g_p = tape.planar(g)?;
    let gate = tape.sigmoid(a_prime);
    let y = tape.matmul(g_p, gate)?;
    tape.unplanar(y, h, wd)
}

/// Intermediate values of one CPM pass.
#[derive(Debug, Clone, Copy)]
pub struct CpmOutputs {
    pub adjacency: Var,
    pub adjacency_refined: Var,
    pub f_ad: Var,
    /// `concat(f_p, f_ad)`, the displacement-head input (2C channels).
    pub fused: Var,
}

pub fn cpm_forward(tape: &mut Tape, store: &ParamStore, f_p: Var) -> Result<CpmOutputs, NetError> {
    let adjacency = project_adjacency(tape, store, f_p)?;
    let adjacency_refined = spread_messages(tape, store, adjacency)?;
    let f_ad = reverse_project(tape, store, adjacency_refined, f_p)?;
    let fused = tape.concat_channels(&[f_p, f_ad])?;
    Ok(CpmOutputs {
        adjacency,
        adjacency_refined,
        f_ad,
        fused,
    })
}

/// Rows of `sigmoid(A')` as CSV, one row per line.
pub fn gate_csv(a_prime: &crate::netops::Tensor) -> String {
    let c = a_prime.shape()[1];
    a_prime
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .map(|v| crate::netops::sigmoid(*v).to_string())
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::netops::Tensor;

    fn setup(c: usize, h: usize, wd: usize, seed: u64) -> (ParamStore, Tensor) {
        let mut store = ParamStore::new();
        init_params(&mut store, seed, c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (store, Tensor::uniform(&[c, h, wd], -1.0, 1.0, &mut rng))
    }

    /// Per-location 1×1 projection.
    fn naive_project(x: &Tensor, wt: &Tensor, bias: &Tensor) -> Vec<Vec<f64>> {
        let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        (0..h * wd)
            .map(|l| {
                (0..c)
                    .map(|o| {
                        bias.data()[o]
                            + (0..c).map(|i| wt.data()[o * c + i] * x.data()[i * h * wd + l]).sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn zero_theta_gives_zero_adjacency() {
        let (mut store, x) = setup(4, 2, 2, 1);
        *store.value_mut("cpm.theta.w").unwrap() = Tensor::zeros(&[4, 4, 1, 1]);
        *store.value_mut("cpm.theta.b").unwrap() = Tensor::zeros(&[4]);
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let a = project_adjacency(&mut tape, &store, xv).unwrap();
        assert!(tape.value(a).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjacency_matches_bilinear_loop() {
        let (store, x) = setup(4, 2, 2, 2);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let a = project_adjacency(&mut tape, &store, xv).unwrap();
        let th = naive_project(&x, store.value("cpm.theta.w").unwrap(), store.value("cpm.theta.b").unwrap());
        let ph = naive_project(&x, store.value("cpm.phi.w").unwrap(), store.value("cpm.phi.b").unwrap());
        for i in 0..4 {
            for j in 0..4 {
                let expected: f64 = (0..4).map(|l| th[l][i] * ph[l][j]).sum();
                assert!((tape.value(a).data()[i * 4 + j] - expected).abs() <= 1e-12);
            }
        }
        assert_eq!(tape.shape(a), &[4, 4]);
    }

    #[test]
    fn swapping_theta_and_phi_transposes() {
        let (store, x) = setup(5, 3, 2, 3);
        let mut swapped = store.clone();
        for suffix in ["w", "b"] {
            let t = store.value(&format!("cpm.theta.{suffix}")).unwrap().clone();
            let p = store.value(&format!("cpm.phi.{suffix}")).unwrap().clone();
            *swapped.value_mut(&format!("cpm.theta.{suffix}")).unwrap() = p;
            *swapped.value_mut(&format!("cpm.phi.{suffix}")).unwrap() = t;
        }
        // Separate tapes: a tape binds each parameter name once.
        let adjacency = |store: &ParamStore| {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let a = project_adjacency(&mut tape, store, xv).unwrap();
            tape.value(a).clone()
        };
        let (a, b) = (adjacency(&store), adjacency(&swapped));
        for i in 0..5 {
            for j in 0..5 {
                assert!((a.data()[i * 5 + j] - b.data()[j * 5 + i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn spread_zero_and_residual_cases() {
        let (mut store, _) = setup(3, 1, 1, 4);
        for m in MIXES {
            *store.value_mut(&b(m)).unwrap() = Tensor::zeros(&[3]);
        }
        let mut tape = Tape::new();
        let zero = tape.input(Tensor::zeros(&[3, 3]));
        let out = spread_messages(&mut tape, &store, zero).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));

        *store.value_mut("cpm.mix1.w").unwrap() = Tensor::zeros(&[3, 3, 1]);
        let mut eye = Tensor::zeros(&[3, 3, 1]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        *store.value_mut("cpm.mix2.w").unwrap() = eye;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::uniform(&[3, 3], -2.0, 2.0, &mut rng);
        let mut tape = Tape::new();
        let av = tape.input(a.clone());
        let out = spread_messages(&mut tape, &store, av).unwrap();
        assert_eq!(tape.value(out), &a);

        let bad = tape.input(Tensor::zeros(&[3, 2]));
        assert!(spread_messages(&mut tape, &store, bad).is_err());
    }

    #[test]
    fn spread_matches_matrix_form() {
        let (store, _) = setup(4, 1, 1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let av = tape.input(a.clone());
        let out = spread_messages(&mut tape, &store, av).unwrap();
        // Kernel-1 conv1d over rows-as-channels: M·A + b·1ᵀ.
        let mix = |name: &str, x: &[f64]| -> Vec<f64> {
            let wt = store.value(&w(name)).unwrap().data();
            let bias = store.value(&b(name)).unwrap().data();
            let mut y = vec![0.0; 16];
            for i in 0..4 {
                for j in 0..4 {
                    y[i * 4 + j] = bias[i] + (0..4).map(|k| wt[i * 4 + k] * x[k * 4 + j]).sum::<f64>();
                }
            }
            y
        };
        let t = mix("mix1", a.data());
        let merged: Vec<f64> = t.iter().zip(a.data()).map(|(p, q)| p + q).collect();
        let expected = mix("mix2", &merged);
        for (p, q) in tape.value(out).data().iter().zip(&expected) {
            assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn reverse_projection_gating() {
        let (store, x) = setup(4, 3, 3, 6);
        let g_out = naive_project(&x, store.value("cpm.g.w").unwrap(), store.value("cpm.g.b").unwrap());
        let g_max = g_out.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));

        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let closed = tape.input(Tensor::full(&[4, 4], -30.0));
        let f_ad = reverse_project(&mut tape, &store, closed, xv).unwrap();
        assert!(tape.value(f_ad).data().iter().all(|v| v.abs() <= 4.0 * 1e-13 * g_max));

        let mut diag = Tensor::full(&[4, 4], -30.0);
        for i in 0..4 {
            diag.data_mut()[i * 5] = 30.0;
        }
        let dv = tape.input(diag);
        let f_ad = reverse_project(&mut tape, &store, dv, xv).unwrap();
        for l in 0..9 {
            for c in 0..4 {
                let got = tape.value(f_ad).data()[c * 9 + l];
                let want = g_out[l][c];
                assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::uniform(&[4, 4], -3.0, 3.0, &mut rng);
        let av = tape.input(a.clone());
        let f_ad = reverse_project(&mut tape, &store, av, xv).unwrap();
        for l in 0..9 {
            for j in 0..4 {
                let expected: f64 = (0..4)
                    .map(|i| g_out[l][i] * crate::netops::sigmoid(a.data()[i * 4 + j]))
                    .sum();
                assert!((tape.value(f_ad).data()[j * 9 + l] - expected).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn forward_shapes_and_pass_through() {
        let (store, x) = setup(8, 4, 4, 7);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let out = cpm_forward(&mut tape, &store, xv).unwrap();
        assert_eq!(tape.shape(out.fused), &[16, 4, 4]);
        assert_eq!(tape.shape(out.adjacency), &[8, 8]);
        assert_eq!(tape.value(out.fused).channel_slice(0, 8), x);
        assert!(tape.value(out.f_ad).is_finite());
    }

    #[test]
    fn adjacency_ignores_location_order() {
        let (store, x) = setup(4, 3, 4, 8);
        // Reverse the 12 locations in every channel.
        let mut permuted = x.clone();
        for c in 0..4 {
            let plane = &mut permuted.data_mut()[c * 12..(c + 1) * 12];
            plane.reverse();
        }
        let mut tape = Tape::new();
        let (xv, pv) = (tape.input(x), tape.input(permuted));
        let a = project_adjacency(&mut tape, &store, xv).unwrap();
        let b = project_adjacency(&mut tape, &store, pv).unwrap();
        for (p, q) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let (store, _) = setup(4, 2, 2, 9);
        let mut tape = Tape::new();
        let xv = tape.input(Tensor::zeros(&[3, 2, 2]));
        assert!(project_adjacency(&mut tape, &store, xv).is_err());
    }

    #[test]
    fn gate_csv_rows() {
        let csv = gate_csv(&Tensor::new(&[2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap());
        assert_eq!(csv, "0.5,0.5\n0.5,0.5\n");
    }
}
