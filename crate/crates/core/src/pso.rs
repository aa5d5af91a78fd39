//! Particle swarm adaptation of the nine controller gains.
//!
//! Every particle owns a replica of the factor model and its own controller
//! memory. One outer iteration gives each particle one controller-refined SGD
//! epoch with its current position as gains, scores it on the validation set,
//! updates personal and global bests and finally moves the particles.

use std::io::Write;
use std::time::Instant;

use log::{debug, trace};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::controller::{ControllerState, GainVector, GAIN_BOUNDS, GAIN_NAMES};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::model::{FactorModel, HyperParams};
use crate::seed;
use crate::tensor::{DataSplit, Entry};
use crate::trainer::{self, EpochReport, StopReason};

pub const DIM: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct PsoConfig {
    pub particles: usize,
    pub inertia: f64,
    pub c1: f64,
    pub c2: f64,
    /// Velocity limit per dimension as a fraction of the box width.
    pub velocity_fraction: f64,
    pub rho: f64,
    pub mu: f64,
    pub bounds: [(f64, f64); DIM],
    pub seed: u64,
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self {
            particles: 5,
            inertia: 0.729,
            c1: 2.0,
            c2: 2.0,
            velocity_fraction: 0.2,
            rho: 0.5,
            mu: 0.5,
            bounds: GAIN_BOUNDS,
            seed: 0,
        }
    }
}

impl PsoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("PSO config: {what}")));
        if self.particles == 0 {
            return bad("need at least one particle");
        }
        let nonneg = [
            self.inertia,
            self.c1,
            self.c2,
            self.velocity_fraction,
            self.rho,
            self.mu,
        ];
        if nonneg.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return bad("w, c1, c2, m, rho and mu must be finite and non-negative");
        }
        if self.rho + self.mu <= 0.0 {
            return bad("rho + mu must be positive");
        }
        if self
            .bounds
            .iter()
            .any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi))
        {
            return bad("every bound needs lower < upper");
        }
        Ok(())
    }

    pub fn v_max(&self) -> [f64; DIM] {
        self.bounds
            .map(|(lo, hi)| self.velocity_fraction * (hi - lo))
    }
}

/// `rho·RMSE + mu·MAE` on the validation set.
pub fn fitness(model: &FactorModel, validation: &[Entry], rho: f64, mu: f64) -> Result<f64> {
    let r = metrics::evaluate(model, validation)?;
    Ok(fitness_of(&r, rho, mu))
}

pub fn fitness_of(report: &EvalReport, rho: f64, mu: f64) -> f64 {
    rho * report.rmse + mu * report.mae
}

/// Position, velocity and personal best of a particle.
#[derive(Debug, Clone, PartialEq)]
pub struct Kinematics {
    pub position: [f64; DIM],
    pub velocity: [f64; DIM],
    pub pbest_position: [f64; DIM],
}

impl Kinematics {
    fn random(config: &PsoConfig, rng: &mut impl Rng) -> Self {
        let v_max = config.v_max();
        let mut position = [0.0; DIM];
        let mut velocity = [0.0; DIM];
        for d in 0..DIM {
            let (lo, hi) = config.bounds[d];
            position[d] = lo + (hi - lo) * rng.gen::<f64>();
            velocity[d] = v_max[d] * (2.0 * rng.gen::<f64>() - 1.0);
        }
        Self {
            position,
            velocity,
            pbest_position: position,
        }
    }

    /// Inertia plus attraction to personal and global best, then velocity and
    /// position clamping.
    pub fn step(&mut self, gbest: &[f64; DIM], config: &PsoConfig, rng: &mut impl Rng) {
        let r1: f64 = rng.gen();
        let r2: f64 = rng.gen();
        let v_max = config.v_max();
        for d in 0..DIM {
            let s = self.position[d];
            let v = config.inertia * self.velocity[d]
                + config.c1 * r1 * (self.pbest_position[d] - s)
                + config.c2 * r2 * (gbest[d] - s);
            let v = v.clamp(-v_max[d], v_max[d]);
            let (lo, hi) = config.bounds[d];
            self.velocity[d] = v;
            self.position[d] = (s + v).clamp(lo, hi);
        }
    }

    pub fn gains(&self) -> GainVector {
        GainVector::from_array(self.position)
    }
}

#[derive(Debug, Clone)]
pub struct Particle {
    pub kinematics: Kinematics,
    pub pbest_fitness: f64,
    pub model: FactorModel,
    pub state: ControllerState,
    /// Validation metrics from the latest evaluation; `None` after divergence.
    pub last_eval: Option<EvalReport>,
    pub fitness: f64,
    rng: ChaCha8Rng,
}

impl Particle {
    fn train_and_score(
        &mut self,
        train: &[Entry],
        validation: &[Entry],
        hyper: &HyperParams,
        order_seed: u64,
        config: &PsoConfig,
    ) -> Result<()> {
        let gains = self.kinematics.gains();
        let step = trainer::sgd_epoch_npid(
            &mut self.model,
            train,
            hyper.eta,
            hyper.lambda,
            &gains,
            &mut self.state,
            order_seed,
        );
        let eval = match step {
            Ok(()) => Some(metrics::evaluate(&self.model, validation)?),
            Err(Error::Diverged) => None,
            Err(e) => return Err(e),
        };
        self.last_eval = eval.filter(|r| r.rmse.is_finite() && r.mae.is_finite());
        self.fitness = self
            .last_eval
            .map_or(f64::INFINITY, |r| fitness_of(&r, config.rho, config.mu));
        Ok(())
    }
}

/// One line of the swarm trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleRecord {
    pub iteration: usize,
    pub particle: usize,
    pub fitness: f64,
    pub position: [f64; DIM],
    /// `(I_q − I_{q−1}) / (I_Q^l − I_Q^{l−1})` with `I_0^l = I_Q^{l−1}`;
    /// undefined on the first iteration or when the denominator vanishes.
    pub relative: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct IterationSummary {
    pub iteration: usize,
    pub records: Vec<ParticleRecord>,
    pub gbest_fitness: f64,
    pub gbest_particle: Option<usize>,
    pub report: EpochReport,
}

#[derive(Debug, Clone)]
pub struct Swarm {
    config: PsoConfig,
    particles: Vec<Particle>,
    initial_model: FactorModel,
    gbest_position: [f64; DIM],
    gbest_fitness: f64,
    gbest_particle: Option<usize>,
    gbest_model: Option<FactorModel>,
    gbest_eval: Option<EvalReport>,
    previous_last_fitness: Option<f64>,
    iteration: usize,
}

/// Places `config.particles` particles uniformly in the gain box; every
/// replica starts from the same model initialized with `model_seed`.
pub fn init_swarm(
    config: &PsoConfig,
    dims: [usize; 3],
    rank: usize,
    model_seed: u64,
) -> Result<Swarm> {
    config.validate()?;
    let initial_model = FactorModel::init(dims, rank, model_seed)?;
    Ok(Swarm::from_model(config.clone(), initial_model))
}

impl Swarm {
    pub fn from_model(config: PsoConfig, initial_model: FactorModel) -> Self {
        let particles: Vec<Particle> = (0..config.particles)
            .map(|q| {
                let mut rng = seed::rng(seed::derive(config.seed, q as u64));
                let kinematics = Kinematics::random(&config, &mut rng);
                Particle {
                    kinematics,
                    pbest_fitness: f64::INFINITY,
                    model: initial_model.clone(),
                    state: ControllerState::new(),
                    last_eval: None,
                    fitness: f64::INFINITY,
                    rng,
                }
            })
            .collect();
        let gbest_position = particles[0].kinematics.position;
        Self {
            config,
            particles,
            initial_model,
            gbest_position,
            gbest_fitness: f64::INFINITY,
            gbest_particle: None,
            gbest_model: None,
            gbest_eval: None,
            previous_last_fitness: None,
            iteration: 0,
        }
    }

    pub fn config(&self) -> &PsoConfig {
        &self.config
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn gbest_position(&self) -> &[f64; DIM] {
        &self.gbest_position
    }

    pub fn gbest_fitness(&self) -> f64 {
        self.gbest_fitness
    }

    /// Model snapshot taken when the global best was last improved.
    pub fn gbest_model(&self) -> Option<&FactorModel> {
        self.gbest_model.as_ref()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Runs one outer iteration: a training epoch and evaluation per particle
    /// (in parallel), then the sequential best updates and moves.
    pub fn iterate(
        &mut self,
        split: &DataSplit,
        hyper: &HyperParams,
        order_seed: u64,
    ) -> Result<IterationSummary> {
        let started = Instant::now();
        let l = self.iteration;
        let epoch_seed = trainer::epoch_seed(order_seed, l);
        let config = &self.config;
        self.particles
            .par_iter_mut()
            .map(|p| p.train_and_score(&split.train, &split.validation, hyper, epoch_seed, config))
            .collect::<Result<Vec<()>>>()?;

        let mut records = Vec::with_capacity(self.particles.len());
        let mut prev_fitness = self.previous_last_fitness;
        let last_fitness = self.particles.last().map(|p| p.fitness);
        for (q, p) in self.particles.iter_mut().enumerate() {
            let relative = match (prev_fitness, self.previous_last_fitness, last_fitness) {
                (Some(before), Some(prev_last), Some(last)) if last != prev_last => {
                    Some((p.fitness - before) / (last - prev_last)).filter(|x| x.is_finite())
                }
                _ => None,
            };
            prev_fitness = Some(p.fitness);
            records.push(ParticleRecord {
                iteration: l + 1,
                particle: q,
                fitness: p.fitness,
                position: p.kinematics.position,
                relative,
            });
            trace!(
                "iteration {} particle {q}: fitness {} relative {:?}",
                l + 1,
                p.fitness,
                relative
            );

            if p.fitness < p.pbest_fitness {
                p.pbest_fitness = p.fitness;
                p.kinematics.pbest_position = p.kinematics.position;
            }
            if p.fitness < self.gbest_fitness {
                self.gbest_fitness = p.fitness;
                self.gbest_position = p.kinematics.position;
                self.gbest_particle = Some(q);
                self.gbest_model = Some(p.model.clone());
                self.gbest_eval = p.last_eval;
            }
        }
        self.previous_last_fitness = last_fitness;

        // Metrics for the convergence check come from the gbest particle's
        // current replica; fall back to the snapshot if it has since diverged.
        let (train_loss, val) = match (self.gbest_particle, &self.gbest_model, self.gbest_eval) {
            (Some(q), _, _) if self.particles[q].last_eval.is_some() => {
                let p = &self.particles[q];
                let eval = p.last_eval.expect("checked above");
                (p.model.loss(&split.train, hyper.lambda)?, eval)
            }
            (Some(_), Some(m), Some(eval)) => (m.loss(&split.train, hyper.lambda)?, eval),
            _ => (
                f64::INFINITY,
                EvalReport {
                    rmse: f64::INFINITY,
                    mae: f64::INFINITY,
                    count: split.validation.len(),
                },
            ),
        };

        let gbest = self.gbest_position;
        for p in self.particles.iter_mut() {
            if p.last_eval.is_none() {
                debug!("re-initializing a diverged particle");
                let fresh = Kinematics::random(&self.config, &mut p.rng);
                p.kinematics.position = fresh.position;
                p.kinematics.velocity = fresh.velocity;
                p.model = self.initial_model.clone();
                p.state.reset();
            } else {
                p.kinematics.step(&gbest, &self.config, &mut p.rng);
            }
        }

        self.iteration += 1;
        Ok(IterationSummary {
            iteration: l + 1,
            records,
            gbest_fitness: self.gbest_fitness,
            gbest_particle: self.gbest_particle,
            report: EpochReport {
                epoch: l + 1,
                train_loss,
                val_rmse: val.rmse,
                val_mae: val.mae,
                seconds: started.elapsed().as_secs_f64(),
            },
        })
    }
}

#[derive(Debug, Clone)]
pub struct SwarmResult {
    pub best_gains: GainVector,
    pub best_model: FactorModel,
    pub best_fitness: f64,
    /// gbest fitness after each outer iteration.
    pub fitness_trace: Vec<f64>,
    pub reports: Vec<EpochReport>,
    pub records: Vec<ParticleRecord>,
    pub stop: StopReason,
}

/// Runs the swarm until `hyper.max_iters` outer iterations or until the
/// validation RMSE of the gbest particle changes by less than `hyper.tol`.
pub fn evolve(
    split: &DataSplit,
    hyper: &HyperParams,
    config: &PsoConfig,
    model_seed: u64,
    order_seed: u64,
) -> Result<SwarmResult> {
    evolve_with(split, hyper, config, model_seed, order_seed, |_, _| {})
}

/// [`evolve`] with a callback after every outer iteration.
pub fn evolve_with<F>(
    split: &DataSplit,
    hyper: &HyperParams,
    config: &PsoConfig,
    model_seed: u64,
    order_seed: u64,
    mut observer: F,
) -> Result<SwarmResult>
where
    F: FnMut(&IterationSummary, &Swarm),
{
    hyper.validate()?;
    if split.validation.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    let mut swarm = init_swarm(config, split.dims, hyper.rank, model_seed)?;
    let mut reports: Vec<EpochReport> = Vec::new();
    let mut fitness_trace = Vec::new();
    let mut records = Vec::new();
    let mut stop = StopReason::MaxIters;

    for _ in 0..hyper.max_iters {
        let summary = swarm.iterate(split, hyper, order_seed)?;
        observer(&summary, &swarm);
        fitness_trace.push(summary.gbest_fitness);
        records.extend(summary.records.iter().cloned());
        let report = summary.report;
        let converged = reports
            .last()
            .is_some_and(|prev| (report.val_rmse - prev.val_rmse).abs() < hyper.tol);
        reports.push(report);
        if converged {
            stop = StopReason::Converged;
            break;
        }
    }

    let (best_model, best_gains) = match swarm.gbest_model.take() {
        Some(m) => (m, GainVector::from_array(swarm.gbest_position)),
        None if hyper.max_iters == 0 => (
            swarm.initial_model.clone(),
            GainVector::from_array(swarm.gbest_position),
        ),
        None => {
            stop = StopReason::Diverged;
            (
                swarm.initial_model.clone(),
                GainVector::from_array(swarm.gbest_position),
            )
        }
    };
    Ok(SwarmResult {
        best_gains,
        best_model,
        best_fitness: swarm.gbest_fitness,
        fitness_trace,
        reports,
        records,
        stop,
    })
}

/// Swarm trace CSV: `iteration,particle,fitness,Kp1,...,Kd4`.
pub fn write_swarm_csv<W: Write>(
    mut w: W,
    records: &[ParticleRecord],
    comments: &[String],
) -> std::io::Result<()> {
    for c in comments {
        for line in c.lines() {
            writeln!(w, "# {line}")?;
        }
    }
    writeln!(w, "iteration,particle,fitness,{}", GAIN_NAMES.join(","))?;
    for r in records {
        write!(w, "{},{},{}", r.iteration, r.particle, r.fitness)?;
        for x in r.position {
            write!(w, ",{x}")?;
        }
        writeln!(w)?;
    }
    w.flush()
}
