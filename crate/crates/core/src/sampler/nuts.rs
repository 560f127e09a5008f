//! Multinomial NUTS with a diagonal metric and the generalized no-U-turn
//! criterion (checked across the full tree and both merged sub-trees).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::adapt::{DualAveraging, WindowedVariance};
use super::{ChainOutput, DrawStats, LogDensity, SamplerConfig};
use crate::{rng, Error, Result};

#[derive(Debug, Clone)]
struct PhasePoint {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

#[derive(Debug, Default)]
struct TreeStats {
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
}

fn sum(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

pub(crate) struct Nuts<'a, T: LogDensity + ?Sized> {
    target: &'a T,
    pub inv_metric: Vec<f64>,
    pub step_size: f64,
    max_depth: usize,
    max_delta_h: f64,
    chain: usize,
    rng: ChaCha8Rng,
    z: PhasePoint,
}

/// Result of one transition.
pub(crate) struct Transition {
    pub accept_stat: f64,
    pub stats: DrawStats,
}

impl<'a, T: LogDensity + ?Sized> Nuts<'a, T> {
    fn new(target: &'a T, init: &[f64], cfg: &SamplerConfig, chain: usize, rng: ChaCha8Rng) -> Result<Self> {
        let dim = target.dim();
        if init.len() != dim {
            return Err(Error::ShapeMismatch(format!("initial point has {} entries, target dimension {dim}", init.len())));
        }
        let mut z = PhasePoint { q: init.to_vec(), p: vec![0.0; dim], grad: vec![0.0; dim], logp: 0.0 };
        z.logp = target.log_density(&z.q, &mut z.grad);
        if !z.logp.is_finite() {
            return Err(Error::InitFailure { attempts: 1 });
        }
        if z.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { chain });
        }
        Ok(Self {
            target,
            inv_metric: vec![1.0; dim],
            step_size: 1.0,
            max_depth: cfg.max_treedepth.max(1),
            max_delta_h: cfg.divergence_energy_threshold,
            chain,
            rng,
            z,
        })
    }

    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.inv_metric).map(|(p, m)| p * p * m).sum::<f64>()
    }

    fn hamiltonian(&self, z: &PhasePoint) -> f64 {
        let h = -z.logp + self.kinetic(&z.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(p, m)| p * m).collect()
    }

    fn sample_momentum(&mut self, z: &mut PhasePoint) {
        for (p, m) in z.p.iter_mut().zip(&self.inv_metric) {
            let n: f64 = self.rng.sample(StandardNormal);
            *p = n / m.sqrt();
        }
    }

    fn leapfrog(&self, z: &mut PhasePoint, eps: f64) -> Result<()> {
        for i in 0..z.q.len() {
            z.p[i] += 0.5 * eps * z.grad[i];
            z.q[i] += eps * self.inv_metric[i] * z.p[i];
        }
        let logp = self.target.log_density(&z.q, &mut z.grad);
        if logp.is_finite() {
            if z.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient { chain: self.chain });
            }
            z.logp = logp;
            for i in 0..z.p.len() {
                z.p[i] += 0.5 * eps * z.grad[i];
            }
        } else {
            // Outside the support: infinite potential energy.
            z.logp = f64::NEG_INFINITY;
            z.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(())
    }

    /// Heuristic step size: double or halve until the one-step acceptance
    /// crosses 0.8.
    pub fn init_step_size(&mut self) -> Result<()> {
        let z_init = self.z.clone();
        let threshold = 0.8f64.ln();
        let mut z = z_init.clone();
        self.sample_momentum(&mut z);
        let h0 = self.hamiltonian(&z);
        self.leapfrog(&mut z, self.step_size)?;
        let delta_h = h0 - self.hamiltonian(&z);
        let direction = if delta_h > threshold { 1 } else { -1 };
        for _ in 0..100 {
            let mut z = z_init.clone();
            self.sample_momentum(&mut z);
            let h0 = self.hamiltonian(&z);
            self.leapfrog(&mut z, self.step_size)?;
            let delta_h = h0 - self.hamiltonian(&z);
            if (direction == 1 && !(delta_h > threshold)) || (direction == -1 && !(delta_h < threshold)) {
                break;
            }
            self.step_size = if direction == 1 { 2.0 * self.step_size } else { 0.5 * self.step_size };
            if self.step_size > 1e7 || self.step_size < 1e-12 {
                self.step_size = self.step_size.clamp(1e-12, 1e7);
                break;
            }
        }
        self.z = z_init;
        Ok(())
    }

    pub fn position(&self) -> &[f64] {
        &self.z.q
    }

    pub fn transition(&mut self) -> Result<Transition> {
        let mut z0 = self.z.clone();
        self.sample_momentum(&mut z0);
        let h0 = self.hamiltonian(&z0);

        let mut z_fwd = z0.clone();
        let mut z_bck = z0.clone();
        let mut z_sample = z0.clone();
        let mut z_propose = z0.clone();

        let ps0 = self.p_sharp(&z0.p);
        let mut p_fwd_fwd = z0.p.clone();
        let mut p_sharp_fwd_fwd = ps0.clone();
        let mut p_fwd_bck = z0.p.clone();
        let mut p_sharp_fwd_bck = ps0.clone();
        let mut p_bck_fwd = z0.p.clone();
        let mut p_sharp_bck_fwd = ps0.clone();
        let mut p_bck_bck = z0.p.clone();
        let mut p_sharp_bck_bck = ps0;

        let mut rho = z0.p.clone();
        let mut log_sum_weight = 0.0;
        let mut stats = TreeStats::default();
        let mut depth = 0;
        let dim = rho.len();

        while depth < self.max_depth {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid = if self.rng.random::<f64>() > 0.5 {
                rho_bck.copy_from_slice(&rho);
                p_bck_fwd.clone_from(&p_fwd_bck);
                p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
                self.build_tree(
                    depth,
                    &mut z_fwd,
                    &mut z_propose,
                    &mut p_sharp_fwd_bck,
                    &mut p_sharp_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    h0,
                    1.0,
                    &mut stats,
                    &mut lsw_subtree,
                )?
            } else {
                rho_fwd.copy_from_slice(&rho);
                p_fwd_bck.clone_from(&p_bck_fwd);
                p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
                self.build_tree(
                    depth,
                    &mut z_bck,
                    &mut z_propose,
                    &mut p_sharp_bck_fwd,
                    &mut p_sharp_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    h0,
                    -1.0,
                    &mut stats,
                    &mut lsw_subtree,
                )?
            };
            if !valid {
                break;
            }
            depth += 1;

            if lsw_subtree > log_sum_weight {
                z_sample.clone_from(&z_propose);
            } else {
                let accept = (lsw_subtree - log_sum_weight).exp();
                if self.rng.random::<f64>() < accept {
                    z_sample.clone_from(&z_propose);
                }
            }
            log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);

            rho = sum(&rho_bck, &rho_fwd);
            let mut persist = criterion(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
            let rho_ext = sum(&rho_bck, &p_fwd_bck);
            persist &= criterion(&p_sharp_bck_bck, &p_sharp_fwd_bck, &rho_ext);
            let rho_ext = sum(&rho_fwd, &p_bck_fwd);
            persist &= criterion(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &rho_ext);
            if !persist {
                break;
            }
        }

        let accept_stat = if stats.n_leapfrog > 0 { stats.sum_metro_prob / stats.n_leapfrog as f64 } else { 0.0 };
        let energy = self.hamiltonian(&z_sample);
        self.z = z_sample;
        Ok(Transition {
            accept_stat,
            stats: DrawStats {
                treedepth: depth,
                n_leapfrog: stats.n_leapfrog,
                divergent: stats.divergent,
                accept_stat,
                energy,
                step_size: self.step_size,
            },
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: usize,
        z: &mut PhasePoint,
        z_propose: &mut PhasePoint,
        p_sharp_beg: &mut Vec<f64>,
        p_sharp_end: &mut Vec<f64>,
        rho: &mut [f64],
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        h0: f64,
        sign: f64,
        stats: &mut TreeStats,
        log_sum_weight: &mut f64,
    ) -> Result<bool> {
        if depth == 0 {
            self.leapfrog(z, sign * self.step_size)?;
            stats.n_leapfrog += 1;
            let h = self.hamiltonian(z);
            if h - h0 > self.max_delta_h {
                stats.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, h0 - h);
            stats.sum_metro_prob += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            z_propose.clone_from(z);
            *p_sharp_beg = self.p_sharp(&z.p);
            p_sharp_end.clone_from(p_sharp_beg);
            add_into(rho, &z.p);
            p_beg.clone_from(&z.p);
            p_end.clone_from(&z.p);
            return Ok(!stats.divergent);
        }

        let dim = rho.len();
        let mut p_sharp_init_end = vec![0.0; dim];
        let mut p_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        let mut lsw_init = f64::NEG_INFINITY;
        let valid_init = self.build_tree(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            h0,
            sign,
            stats,
            &mut lsw_init,
        )?;
        if !valid_init {
            return Ok(false);
        }

        let mut z_propose_final = z.clone();
        let mut rho_final = vec![0.0; dim];
        let mut p_final_beg = vec![0.0; dim];
        let mut p_sharp_final_beg = vec![0.0; dim];
        let mut lsw_final = f64::NEG_INFINITY;
        let valid_final = self.build_tree(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            h0,
            sign,
            stats,
            &mut lsw_final,
        )?;
        if !valid_final {
            return Ok(false);
        }

        let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree {
            z_propose.clone_from(&z_propose_final);
        } else {
            let accept = (lsw_final - lsw_subtree).exp();
            if self.rng.random::<f64>() < accept {
                z_propose.clone_from(&z_propose_final);
            }
        }

        let rho_subtree = sum(&rho_init, &rho_final);
        add_into(rho, &rho_subtree);
        let mut persist = criterion(p_sharp_beg, p_sharp_end, &rho_subtree);
        let rho_ext = sum(&rho_init, &p_final_beg);
        persist &= criterion(p_sharp_beg, &p_sharp_final_beg, &rho_ext);
        let rho_ext = sum(&rho_final, &p_init_end);
        persist &= criterion(&p_sharp_init_end, p_sharp_end, &rho_ext);
        Ok(persist)
    }
}

/// Run one chain: adaptive warmup followed by `post_warmup_per_chain`
/// retained draws with frozen step size and metric.
pub fn nuts_chain<T: LogDensity + ?Sized>(target: &T, init: &[f64], cfg: &SamplerConfig, chain_id: usize) -> Result<ChainOutput> {
    cfg.validate()?;
    let mut nuts = Nuts::new(target, init, cfg, chain_id, rng::chain_rng(cfg.seed, chain_id))?;
    let dim = target.dim();

    let mut da = DualAveraging::new(cfg.target_accept);
    da.set_mu((10.0 * nuts.step_size).ln());
    nuts.init_step_size()?;
    let mut windows = WindowedVariance::new(dim, cfg.warmup);
    let mut warmup_divergent = 0;
    for _ in 0..cfg.warmup {
        let t = nuts.transition()?;
        warmup_divergent += t.stats.divergent as usize;
        nuts.step_size = da.learn(t.accept_stat);
        let q = nuts.position().to_vec();
        if windows.learn(&mut nuts.inv_metric, &q) {
            nuts.init_step_size()?;
            da.set_mu((10.0 * nuts.step_size).ln());
            da.restart();
        }
    }
    if cfg.warmup > 0 {
        nuts.step_size = da.final_step_size();
    }

    let mut draws = Vec::with_capacity(cfg.post_warmup_per_chain);
    let mut stats = Vec::with_capacity(cfg.post_warmup_per_chain);
    for _ in 0..cfg.post_warmup_per_chain {
        let t = nuts.transition()?;
        draws.push(nuts.position().to_vec());
        stats.push(t.stats);
    }
    Ok(ChainOutput {
        chain_id,
        draws,
        stats,
        step_size: nuts.step_size,
        inv_metric: nuts.inv_metric.clone(),
        warmup_divergent,
        max_treedepth: nuts.max_depth,
    })
}
