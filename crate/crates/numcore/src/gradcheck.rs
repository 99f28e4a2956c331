//! Central-difference gradient checking in 64-bit.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Tensors with more elements than this are subsampled.
    pub full_check_limit: usize,
    /// Coordinates drawn from each subsampled tensor.
    pub sampled_coords: usize,
    /// Seed of the coordinate sampler, recorded in the report.
    pub seed: u64,
    /// Denominator floor of the relative error, so gradients at round-off
    /// level are compared absolutely.
    pub floor: f64,
    /// Halvings of `h` allowed when a difference straddles a kink.
    pub max_halvings: u32,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-4,
            tol: 1e-4,
            full_check_limit: 256,
            sampled_coords: 4,
            seed: 0x5eed,
            floor: 1e-6,
            max_halvings: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub coords_checked: usize,
    pub subsampled: bool,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub flagged: Vec<usize>,
    /// Coordinates whose `±h` evaluations fell on different sides of a kink
    /// and were differenced with a smaller step.
    pub reduced_step: Vec<usize>,
}

impl TensorCheck {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub seed: u64,
    pub h: f64,
    pub tol: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(TensorCheck::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn coords_checked(&self) -> usize {
        self.tensors.iter().map(|t| t.coords_checked).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

type ParamGrad = (ParamId, Option<Vec<f64>>);

/// Compares tape gradients of the scalar built by `f` against central
/// differences for every trainable tensor in `store`.
///
/// A central difference is only meaningful when `x ± h` lie on the same
/// smooth piece as `x`. The tape's branch signature tells when they do not;
/// the step for that coordinate is then halved until they do, up to
/// `max_halvings` times.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let (analytic, base_sig): (Vec<ParamGrad>, u64) = {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape)?;
        let sig = tape.branch_signature();
        let grads = tape.backward(loss)?;
        let g = store
            .trainable()
            .map(|id| (id, grads.param(id).map(<[f64]>::to_vec)))
            .collect();
        (g, sig)
    };
    let eval = |s: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut tape = Tape::with_params(s);
        let loss = f(&mut tape)?;
        Ok((tape.item(loss), tape.branch_signature()))
    };

    let mut work = store.clone();
    let mut tensors = Vec::new();
    for (id, grad) in analytic {
        let len = store.get(id).len();
        let subsampled = len > opts.full_check_limit;
        let coords: Vec<usize> = if subsampled {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (id.index() as u64).wrapping_mul(0x9e37_79b9));
            let mut c = sample(&mut rng, len, opts.sampled_coords.min(len)).into_vec();
            c.sort_unstable();
            c
        } else {
            (0..len).collect()
        };
        let mut check = TensorCheck {
            name: store.name(id).to_string(),
            coords_checked: coords.len(),
            subsampled,
            max_rel_error: 0.0,
            worst_coord: coords[0],
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            flagged: Vec::new(),
            reduced_step: Vec::new(),
        };
        for &c in &coords {
            let orig = work.get(id).data()[c];
            let mut h = opts.h;
            let mut halvings = 0;
            let numeric = loop {
                work.get_mut(id).data_mut()[c] = orig + h;
                let (fp, sp) = eval(&work)?;
                work.get_mut(id).data_mut()[c] = orig - h;
                let (fm, sm) = eval(&work)?;
                work.get_mut(id).data_mut()[c] = orig;
                let smooth = sp == base_sig && sm == base_sig;
                if smooth || halvings == opts.max_halvings {
                    break (fp - fm) / (2.0 * h);
                }
                h *= 0.5;
                halvings += 1;
            };
            if halvings > 0 {
                check.reduced_step.push(c);
            }
            let a = grad.as_ref().map_or(0.0, |g| g[c]);
            let err = relative_error(a, numeric, opts.floor);
            if err >= check.max_rel_error {
                check.max_rel_error = err;
                check.worst_coord = c;
                check.analytic_at_worst = a;
                check.numeric_at_worst = numeric;
            }
            if err > opts.tol || !err.is_finite() {
                check.flagged.push(c);
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport {
        seed: opts.seed,
        h: opts.h,
        tol: opts.tol,
        tensors,
    })
}

type Builder = fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>;

fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Builder)> {
    fn s(v: &[&[usize]]) -> Vec<Vec<usize>> {
        v.iter().map(|x| x.to_vec()).collect()
    }
    vec![
        ("matmul", s(&[&[3, 4], &[4, 2]]), |t, v| t.matmul(v[0], v[1])),
        ("bmm", s(&[&[2, 3, 4], &[2, 4, 5]]), |t, v| t.bmm(v[0], v[1], false)),
        ("bmm_t", s(&[&[2, 3, 4], &[2, 5, 4]]), |t, v| t.bmm(v[0], v[1], true)),
        ("add", s(&[&[2, 3], &[2, 3]]), |t, v| t.add(v[0], v[1])),
        ("sub", s(&[&[2, 3], &[2, 3]]), |t, v| t.sub(v[0], v[1])),
        ("mul", s(&[&[2, 3], &[2, 3]]), |t, v| t.mul(v[0], v[1])),
        ("add_bias", s(&[&[2, 3], &[3]]), |t, v| t.add_bias(v[0], v[1])),
        ("scale", s(&[&[2, 3]]), |t, v| Ok(t.scale(v[0], -1.7))),
        ("mul_scalar", s(&[&[2, 3], &[1]]), |t, v| t.mul_scalar(v[0], v[1])),
        ("div_scalar", s(&[&[2, 3], &[1]]), |t, v| {
            let sq = t.mul(v[1], v[1])?;
            let half = t.constant(&[1], vec![0.5])?;
            let d = t.add(sq, half)?;
            t.div_scalar(v[0], d)
        }),
        ("permute", s(&[&[2, 3, 4]]), |t, v| t.permute(v[0], &[2, 0, 1])),
        ("reshape", s(&[&[3, 4], &[2, 2]]), |t, v| {
            let r = t.reshape(v[0], &[6, 2])?;
            t.matmul(r, v[1])
        }),
        ("softmax", s(&[&[3, 4, 2]]), |t, v| t.softmax(v[0], 1, 0.7)),
        ("softmax_last", s(&[&[3, 4, 2]]), |t, v| t.softmax(v[0], 2, 1.3)),
        ("layer_norm", s(&[&[3, 6], &[6], &[6]]), |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        ("relu", s(&[&[3, 5]]), |t, v| {
            // shifted away from the kink so central differences are exact
            let c = t.constant(&[3, 5], (0..15).map(|i| if i % 2 == 0 { 3.0 } else { -3.0 }).collect())?;
            let x = t.add(v[0], c)?;
            Ok(t.relu(x))
        }),
        ("gelu", s(&[&[3, 5]]), |t, v| Ok(t.gelu(v[0]))),
        ("log", s(&[&[2, 3]]), |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let c = t.constant(&[2, 3], vec![0.1; 6])?;
            let p = t.add(sq, c)?;
            Ok(t.log_clamped(p, 1e-12))
        }),
        ("sum", s(&[&[2, 3]]), |t, v| Ok(t.sum(v[0]))),
        ("mean", s(&[&[2, 3]]), |t, v| Ok(t.mean(v[0]))),
        ("mean_axis", s(&[&[3, 4, 2]]), |t, v| t.mean_axis(v[0], 1)),
        ("cosine", s(&[&[4, 5], &[3, 5]]), |t, v| t.cosine_matrix(v[0], v[1])),
        ("normalize", s(&[&[3, 5]]), |t, v| t.normalize(v[0])),
        ("repeat", s(&[&[2, 2]]), |t, v| t.repeat(v[0], 3)),
        ("concat", s(&[&[2, 3, 2], &[2, 1, 2]]), |t, v| {
            t.concat(&[v[0], v[1]], 1)
        }),
        ("slice", s(&[&[2, 4, 3]]), |t, v| t.slice(v[0], 1, 1, 2)),
    ]
}

/// Checks one operation on random inputs of the given shapes. The output is
/// reduced against a fixed random probe so every element gets its own weight.
pub fn check_operation(
    shapes: &[Vec<usize>],
    build: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let mut ids = Vec::new();
    for (i, s) in shapes.iter().enumerate() {
        let t = crate::Tensor::<f64>::randn(s, 1.0, &mut rng).with_grad();
        ids.push(store.insert(format!("in{i}"), t)?);
    }
    let probe_seed = seed ^ 0xa5a5;
    grad_check(
        &store,
        |t| {
            let vars: Vec<Var> = ids.iter().map(|&id| t.param(id)).collect();
            let y = build(t, &vars)?;
            let shape = t.shape(y).to_vec();
            let mut pr = ChaCha8Rng::seed_from_u64(probe_seed);
            let w = crate::Tensor::<f64>::randn(&shape, 1.0, &mut pr);
            let w = t.leaf(&w);
            let p = t.mul(y, w)?;
            Ok(t.sum(p))
        },
        opts,
    )
}

/// Every differentiable primitive of the tape, each checked on small random inputs.
pub fn primitive_suite(opts: &GradCheckOptions) -> Result<Vec<(String, GradCheckReport)>> {
    primitive_cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, shapes, build))| {
            check_operation(&shapes, build, opts.seed.wrapping_add(i as u64), opts).map(|r| (name.to_string(), r))
        })
        .collect()
}
