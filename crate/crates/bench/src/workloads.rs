//! Benchmark workloads. Each runs identically in eager and staged mode
//! given the same seed; only the execution strategy differs.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use stageflow::{ops, stage, Arg, DType, GradientTape, Operand, PolymorphicFunction, Result, Tensor, Variable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, clap::ValueEnum)]
pub enum WorkloadKind {
    #[value(name = "mlp_train")]
    MlpTrain,
    #[value(name = "leapfrog")]
    Leapfrog,
    #[value(name = "microop_loop")]
    MicroopLoop,
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WorkloadKind::MlpTrain => "mlp_train",
            WorkloadKind::Leapfrog => "leapfrog",
            WorkloadKind::MicroopLoop => "microop_loop",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, clap::ValueEnum)]
pub enum Mode {
    Eager,
    Staged,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Eager => "eager",
            Mode::Staged => "staged",
        })
    }
}

/// One benchmark iteration at a time. Must be driven on a thread that has
/// the workload's runtime entered.
pub trait Workload {
    /// Runs one iteration and returns its loss.
    fn step(&mut self) -> Result<f64>;
    /// Current model or integrator state, for trajectory comparison.
    fn state(&self) -> Result<Vec<f64>>;
    /// Concrete functions held by the workload's staged functions.
    fn cache_size(&self) -> usize {
        0
    }
}

pub fn build(kind: WorkloadKind, mode: Mode, batch: usize, seed: u64) -> Result<Box<dyn Workload>> {
    Ok(match kind {
        WorkloadKind::MlpTrain => Box::new(MlpTrain::new(mode, batch, seed)?),
        WorkloadKind::Leapfrog => Box::new(Leapfrog::new(mode, batch, seed)?),
        WorkloadKind::MicroopLoop => Box::new(MicroopLoop::new(mode, batch)?),
    })
}

fn normal(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

fn tensor(args: &[Arg], i: usize) -> &Tensor {
    args[i].as_tensor().expect("workload arguments are tensors")
}

pub const MLP_INPUTS: usize = 16;
pub const MLP_HIDDEN: usize = 32;
const MLP_LEARNING_RATE: f64 = 0.05;

#[derive(Clone)]
struct MlpParams {
    w1: Variable,
    b1: Variable,
    w2: Variable,
    b2: Variable,
}

impl MlpParams {
    fn all(&self) -> [&Variable; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    /// Mean squared error of a relu hidden layer and a linear readout.
    fn loss(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let h = ops::relu(&ops::add(&ops::matmul(x, &self.w1.read()?)?, &self.b1.read()?)?)?;
        let pred = ops::add(&ops::matmul(&h, &self.w2.read()?)?, &self.b2.read()?)?;
        let err = ops::sub(&pred, y)?;
        ops::reduce_mean(&ops::mul(&err, &err)?, None, false)
    }

    fn apply(&self, grads: &[Tensor], neg_lr: &Tensor) -> Result<()> {
        for (v, g) in self.all().into_iter().zip(grads) {
            v.assign_add(&ops::mul(g, neg_lr)?)?;
        }
        Ok(())
    }
}

/// Two-layer regression network trained by gradient descent. Staged mode
/// stages the forward pass and the parameter update; the backward pass is
/// staged along with the forward.
pub struct MlpTrain {
    params: MlpParams,
    x: Tensor,
    y: Tensor,
    neg_lr: Tensor,
    staged: Option<(PolymorphicFunction, PolymorphicFunction)>,
}

impl MlpTrain {
    pub fn new(mode: Mode, batch: usize, seed: u64) -> Result<MlpTrain> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let var = |rng: &mut ChaCha8Rng, dims: &[usize], scale: f64| {
            let n = dims.iter().product();
            Variable::new(&Tensor::from_values(&normal(rng, n, scale), dims, DType::Float32)?)
        };
        let params = MlpParams {
            w1: var(&mut rng, &[MLP_INPUTS, MLP_HIDDEN], 0.25)?,
            b1: var(&mut rng, &[MLP_HIDDEN], 0.0)?,
            w2: var(&mut rng, &[MLP_HIDDEN, 1], 0.25)?,
            b2: var(&mut rng, &[1], 0.0)?,
        };
        let xs = normal(&mut rng, batch * MLP_INPUTS, 1.0);
        let ys: Vec<f64> = xs
            .chunks(MLP_INPUTS)
            .map(|row| row.iter().enumerate().map(|(j, v)| (j as f64 * 0.7).sin() * v).sum::<f64>().tanh())
            .collect();
        let staged = match mode {
            Mode::Eager => None,
            Mode::Staged => {
                let p = params.clone();
                let forward = stage("mlp_forward", move |a| Ok(vec![p.loss(tensor(a, 0), tensor(a, 1))?]));
                let p = params.clone();
                let update = stage("mlp_update", move |a| {
                    let grads: Vec<Tensor> = (0..4).map(|i| tensor(a, i).clone()).collect();
                    p.apply(&grads, tensor(a, 4))?;
                    Ok(Vec::new())
                });
                Some((forward, update))
            }
        };
        Ok(MlpTrain {
            params,
            x: Tensor::from_values(&xs, [batch, MLP_INPUTS], DType::Float32)?,
            y: Tensor::from_values(&ys, [batch, 1], DType::Float32)?,
            neg_lr: Tensor::scalar_f32(-MLP_LEARNING_RATE as f32),
            staged,
        })
    }
}

impl Workload for MlpTrain {
    fn step(&mut self) -> Result<f64> {
        let tape = GradientTape::new();
        let loss = match &self.staged {
            Some((forward, _)) => forward.call(&[Arg::from(&self.x), Arg::from(&self.y)])?.remove(0),
            None => self.params.loss(&self.x, &self.y)?,
        };
        tape.end()?;
        let sources: Vec<Operand> = self.params.all().into_iter().map(Operand::from).collect();
        let grads = tape.gradient(&loss, &sources)?;
        match &self.staged {
            Some((_, update)) => {
                let mut args: Vec<Arg> = grads.into_iter().map(Arg::Tensor).collect();
                args.push(Arg::from(&self.neg_lr));
                update.call(&args)?;
            }
            None => self.params.apply(&grads, &self.neg_lr)?,
        }
        loss.to_scalar()
    }

    fn state(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for v in self.params.all() {
            out.extend(v.read()?.to_f64_vec()?);
        }
        Ok(out)
    }

    fn cache_size(&self) -> usize {
        self.staged.as_ref().map_or(0, |(f, u)| f.cache_size() + u.cache_size())
    }
}

pub const LEAPFROG_STEP_SIZE: f64 = 0.1;
pub const LEAPFROG_STEPS: usize = 10;
/// Precision matrix of the 2-d Gaussian target, log p(q) = -qᵀAq/2 + c.
pub const LEAPFROG_PRECISION: [f64; 4] = [1.0, 0.5, 0.5, 2.0];

/// Gradient of the potential U(q) = qᵀAq/2, taken with a tape.
fn potential_grad(q: &Tensor, precision: &Tensor) -> Result<Tensor> {
    let tape = GradientTape::new();
    tape.watch(q)?;
    let u =
        ops::mul(&ops::reduce_sum(&ops::mul(&ops::matmul(q, precision)?, q)?, None, false)?, &Tensor::scalar_f64(0.5))?;
    tape.end()?;
    Ok(tape.gradient(&u, &[Operand::from(q)])?.remove(0))
}

/// `LEAPFROG_STEPS` symplectic updates: half kick, drift, half kick.
fn integrate(q: &Tensor, p: &Tensor, precision: &Tensor) -> Result<(Tensor, Tensor)> {
    let half = Tensor::scalar_f64(LEAPFROG_STEP_SIZE / 2.0);
    let eps = Tensor::scalar_f64(LEAPFROG_STEP_SIZE);
    let (mut q, mut p) = (q.clone(), p.clone());
    for _ in 0..LEAPFROG_STEPS {
        p = ops::sub(&p, &ops::mul(&half, &potential_grad(&q, precision)?)?)?;
        q = ops::add(&q, &ops::mul(&eps, &p)?)?;
        p = ops::sub(&p, &ops::mul(&half, &potential_grad(&q, precision)?)?)?;
    }
    Ok((q, p))
}

/// Hamiltonian trajectories of a batch of particles under a Gaussian
/// log-density. One iteration integrates every particle over the full
/// step count; the loss is the mean energy, which the integrator nearly
/// conserves.
pub struct Leapfrog {
    q: Tensor,
    p: Tensor,
    precision: Tensor,
    staged: Option<PolymorphicFunction>,
}

impl Leapfrog {
    pub fn new(mode: Mode, batch: usize, seed: u64) -> Result<Leapfrog> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::from_values(&normal(&mut rng, batch * 2, 1.0), [batch, 2], DType::Float64)?;
        let p = Tensor::from_values(&normal(&mut rng, batch * 2, 1.0), [batch, 2], DType::Float64)?;
        let precision = Tensor::from_values(&LEAPFROG_PRECISION, [2, 2], DType::Float64)?;
        let staged = match mode {
            Mode::Eager => None,
            Mode::Staged => {
                let a = precision.clone();
                Some(stage("leapfrog", move |args| {
                    let (q, p) = integrate(tensor(args, 0), tensor(args, 1), &a)?;
                    Ok(vec![q, p])
                }))
            }
        };
        Ok(Leapfrog { q, p, precision, staged })
    }

    fn energy(&self) -> Result<f64> {
        let potential = ops::mul(&ops::matmul(&self.q, &self.precision)?, &self.q)?;
        let kinetic = ops::mul(&self.p, &self.p)?;
        let total = ops::mul(&ops::add(&potential, &kinetic)?, &Tensor::scalar_f64(0.5))?;
        let per_particle = ops::reduce_sum(&total, Some(1), false)?;
        ops::reduce_mean(&per_particle, None, false)?.to_scalar()
    }
}

impl Workload for Leapfrog {
    fn step(&mut self) -> Result<f64> {
        let (q, p) = match &self.staged {
            Some(f) => {
                let mut out = f.call(&[Arg::from(&self.q), Arg::from(&self.p)])?;
                let p = out.pop().expect("two outputs");
                (out.pop().expect("two outputs"), p)
            }
            None => integrate(&self.q, &self.p, &self.precision)?,
        };
        self.q = q;
        self.p = p;
        self.energy()
    }

    fn state(&self) -> Result<Vec<f64>> {
        let mut out = self.q.to_f64_vec()?;
        out.extend(self.p.to_f64_vec()?);
        Ok(out)
    }

    fn cache_size(&self) -> usize {
        self.staged.as_ref().map_or(0, PolymorphicFunction::cache_size)
    }
}

pub const MICROOP_CHAIN: usize = 1000;

/// A chain of scalar adds: per-op dispatch overhead dominates.
pub struct MicroopLoop {
    x: Tensor,
    one: Tensor,
    staged: Option<PolymorphicFunction>,
}

fn chain(x: &Tensor, one: &Tensor) -> Result<Tensor> {
    let mut x = x.clone();
    for _ in 0..MICROOP_CHAIN {
        x = ops::add(&x, one)?;
    }
    Ok(x)
}

impl MicroopLoop {
    pub fn new(mode: Mode, batch: usize) -> Result<MicroopLoop> {
        let staged = match mode {
            Mode::Eager => None,
            Mode::Staged => Some(stage("microop_loop", |a| Ok(vec![chain(tensor(a, 0), tensor(a, 1))?]))),
        };
        Ok(MicroopLoop {
            x: Tensor::from_values(&vec![0.0; batch], [batch], DType::Float32)?,
            one: Tensor::scalar_f32(1.0),
            staged,
        })
    }
}

impl Workload for MicroopLoop {
    fn step(&mut self) -> Result<f64> {
        let y = match &self.staged {
            Some(f) => f.call(&[Arg::from(&self.x), Arg::from(&self.one)])?.remove(0),
            None => chain(&self.x, &self.one)?,
        };
        ops::reduce_mean(&y, None, false)?.to_scalar()
    }

    fn state(&self) -> Result<Vec<f64>> {
        self.x.to_f64_vec()
    }

    fn cache_size(&self) -> usize {
        self.staged.as_ref().map_or(0, PolymorphicFunction::cache_size)
    }
}
