//! Central finite-difference gradient checking against the tape.
//!
//! The loss is a fixed random projection `Σ out ⊙ r` of the checked output.
//! Numeric derivatives only ever call forward, and the projection is summed
//! in f64 outside the tape.

use rand::Rng as _;
use scarceops::rng::seeded;
use scarceops::tensor::{Result, Tape, Tensor, Var};
use scarceops::Scalar;

#[derive(Debug, Clone)]
pub struct CheckStats {
    pub input: usize,
    pub checked: usize,
    pub failures: usize,
    pub max_rel: f64,
    pub max_at: usize,
    pub non_finite: bool,
}

impl CheckStats {
    /// At least 99% of coordinates within tolerance, nothing non-finite.
    pub fn passes(&self) -> bool {
        !self.non_finite && (self.failures as f64) <= 0.01 * self.checked as f64
    }
}

/// `|a - n| / max(|a|, |n|, floor)` with `floor = max(0.1·rms(grad), 1e-2)`:
/// coordinates that are individually near zero are judged against the
/// tensor's own gradient scale, never below an absolute 1e-2.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn projected<T: Scalar>(out: &Tensor<T>, r: &[f64]) -> f64 {
    out.data().iter().zip(r).map(|(&o, &w)| o.to_f64_lossy() * w).sum()
}

/// Checks d(Σ out⊙r)/d(inputs[i]) for every `i` in `wrt`.
pub fn check<T, F>(inputs: &[Tensor<T>], wrt: &[usize], build: F, h: f64, tol: f64, seed: u64) -> Result<Vec<CheckStats>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let forward = |ins: &[Tensor<T>]| -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).clone())
    };
    let probe = forward(inputs)?;
    let mut rng = seeded(seed);
    let r: Vec<f64> = (0..probe.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.leaf(t.clone().requires_grad(wrt.contains(&i))))
        .collect();
    let out = build(&mut tape, &vars)?;
    let proj_t = Tensor::new(probe.shape().to_vec(), r.iter().map(|&v| T::from_f64_lossy(v)).collect())?;
    let proj = tape.constant(proj_t);
    let prod = tape.mul(out, proj)?;
    let loss = tape.sum(prod)?;
    tape.backward(loss)?;

    let mut stats = Vec::new();
    for &i in wrt {
        let analytic: Vec<f64> = tape
            .grad(vars[i])
            .map(|g| g.iter().map(|v| v.to_f64_lossy()).collect())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let rms = (analytic.iter().map(|v| v * v).sum::<f64>() / analytic.len() as f64).sqrt();
        let floor = (0.1 * rms).max(1e-2);
        let mut s = CheckStats {
            input: i,
            checked: 0,
            failures: 0,
            max_rel: 0.0,
            max_at: 0,
            non_finite: false,
        };
        for k in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            let base = plus[i].data()[k];
            plus[i].data_mut()[k] = base + T::from_f64_lossy(h);
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] = base - T::from_f64_lossy(h);
            let step = (plus[i].data()[k] - minus[i].data()[k]).to_f64_lossy();
            let numeric = (projected(&forward(&plus)?, &r) - projected(&forward(&minus)?, &r)) / step;
            let a = analytic[k];
            if !a.is_finite() || !numeric.is_finite() {
                s.non_finite = true;
            }
            let e = rel_err(a, numeric, floor);
            s.checked += 1;
            if e >= tol {
                s.failures += 1;
            }
            if e > s.max_rel {
                s.max_rel = e;
                s.max_at = k;
            }
        }
        stats.push(s);
    }
    Ok(stats)
}

pub type Builder<T> = Box<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>>;

pub const LAYERS: [&str; 12] = [
    "conv2d",
    "conv_transpose2d",
    "batch_norm2d",
    "linear",
    "relu",
    "sigmoid",
    "global_avg_pool2d",
    "mse_loss",
    "cross_entropy",
    "add",
    "mul",
    "reshape",
];

fn rand_tensor<T: Scalar>(rng: &mut scarceops::rng::Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0))).collect()).unwrap()
}

/// One random small configuration (every axis ≤ 4×4×8×8) for `layer`.
pub fn layer_case<T: Scalar>(layer: &str, rng: &mut scarceops::rng::Rng) -> (Vec<Tensor<T>>, Vec<usize>, Builder<T>) {
    use scarceops::tensor::{BatchNormMode, BatchNormStats};
    let n = rng.gen_range(1..=4);
    let c = rng.gen_range(1..=4);
    let h = rng.gen_range(3..=8);
    let w = rng.gen_range(3..=8);
    match layer {
        "conv2d" => {
            let f = rng.gen_range(1..=4);
            let k = rng.gen_range(1..=3);
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=1);
            let ins = vec![
                rand_tensor(rng, &[n, c, h, w]),
                rand_tensor(rng, &[f, c, k, k]),
                rand_tensor(rng, &[f]),
            ];
            (ins, vec![0, 1, 2], Box::new(move |t: &mut Tape<T>, v: &[Var]| t.conv2d(v[0], v[1], Some(v[2]), stride, pad)))
        }
        "conv_transpose2d" => {
            let f = rng.gen_range(1..=4);
            let k = rng.gen_range(2..=4);
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=1);
            let (h, w) = (h.min(5), w.min(5));
            let ins = vec![
                rand_tensor(rng, &[n, c, h, w]),
                rand_tensor(rng, &[c, f, k, k]),
                rand_tensor(rng, &[f]),
            ];
            (
                ins,
                vec![0, 1, 2],
                Box::new(move |t: &mut Tape<T>, v: &[Var]| t.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad)),
            )
        }
        "batch_norm2d" => {
            let n = n.max(2);
            // gamma near its initial value 1; a vanishing gamma leaves only rounding noise.
            let gamma: Vec<T> = (0..c).map(|_| T::from_f64_lossy(rng.gen_range(0.5..1.5))).collect();
            let ins = vec![
                rand_tensor(rng, &[n, c, h, w]),
                Tensor::new([c], gamma).unwrap(),
                rand_tensor(rng, &[c]),
            ];
            (
                ins,
                vec![0, 1, 2],
                Box::new(move |t: &mut Tape<T>, v: &[Var]| {
                    let mut stats = BatchNormStats::new(c);
                    t.batch_norm2d(v[0], v[1], v[2], &mut stats, BatchNormMode::Train { update_running: false })
                }),
            )
        }
        "linear" => {
            let din = rng.gen_range(1..=8);
            let dout = rng.gen_range(1..=8);
            let ins = vec![rand_tensor(rng, &[n, din]), rand_tensor(rng, &[dout, din]), rand_tensor(rng, &[dout])];
            (ins, vec![0, 1, 2], Box::new(|t: &mut Tape<T>, v: &[Var]| t.linear(v[0], v[1], Some(v[2]))))
        }
        "relu" => (vec![rand_tensor(rng, &[n, c, h, w])], vec![0], Box::new(|t: &mut Tape<T>, v: &[Var]| t.relu(v[0]))),
        "sigmoid" => {
            let x = rand_tensor::<T>(rng, &[n, c, h, w]);
            let x = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v * T::from_f64_lossy(4.0)).collect()).unwrap();
            (vec![x], vec![0], Box::new(|t: &mut Tape<T>, v: &[Var]| t.sigmoid(v[0])))
        }
        "global_avg_pool2d" => (
            vec![rand_tensor(rng, &[n, c, h, w])],
            vec![0],
            Box::new(|t: &mut Tape<T>, v: &[Var]| t.global_avg_pool2d(v[0])),
        ),
        "mse_loss" => (
            vec![rand_tensor(rng, &[n, c, h, w]), rand_tensor(rng, &[n, c, h, w])],
            vec![0, 1],
            Box::new(|t: &mut Tape<T>, v: &[Var]| t.mse_loss(v[0], v[1])),
        ),
        "cross_entropy" => {
            let k = rng.gen_range(2..=8);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            (
                vec![rand_tensor(rng, &[n, k])],
                vec![0],
                Box::new(move |t: &mut Tape<T>, v: &[Var]| t.cross_entropy(v[0], &labels)),
            )
        }
        "add" => (
            vec![rand_tensor(rng, &[n, c, h, w]), rand_tensor(rng, &[n, c, h, w])],
            vec![0, 1],
            Box::new(|t: &mut Tape<T>, v: &[Var]| t.add(v[0], v[1])),
        ),
        "mul" => (
            vec![rand_tensor(rng, &[n, c, h, w]), rand_tensor(rng, &[n, c, h, w])],
            vec![0, 1],
            Box::new(|t: &mut Tape<T>, v: &[Var]| t.mul(v[0], v[1])),
        ),
        "reshape" => (
            vec![rand_tensor(rng, &[n, c, h, w])],
            vec![0],
            Box::new(move |t: &mut Tape<T>, v: &[Var]| t.reshape(v[0], [n, c * h * w])),
        ),
        other => panic!("no gradient case for {other}"),
    }
}

/// Runs `configs` random cases of `layer` and pools every checked coordinate.
/// `max_rel`/`max_at` report the worst coordinate seen.
pub fn check_layer<T: Scalar>(layer: &str, configs: usize, h: f64, tol: f64, seed: u64) -> CheckStats {
    let mut rng = seeded(seed);
    let mut total = CheckStats {
        input: 0,
        checked: 0,
        failures: 0,
        max_rel: 0.0,
        max_at: 0,
        non_finite: false,
    };
    for case in 0..configs {
        let (inputs, wrt, build) = layer_case::<T>(layer, &mut rng);
        let stats = check(&inputs, &wrt, build, h, tol, seed.wrapping_add(case as u64)).expect("forward/backward");
        for s in stats {
            total.checked += s.checked;
            total.failures += s.failures;
            total.non_finite |= s.non_finite;
            if s.max_rel > total.max_rel {
                total.max_rel = s.max_rel;
                total.max_at = s.max_at;
                total.input = s.input;
            }
        }
    }
    total
}
