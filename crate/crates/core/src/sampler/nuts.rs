//! Multinomial NUTS transition with a diagonal metric.
//!
//! The trajectory is grown by repeated doubling in a random direction. Each
//! new subtree is sampled multinomially (biased toward the new half at the
//! top level) and growth stops on a U-turn, a divergence or the depth limit.
//! The U-turn test is applied to the whole trajectory and to the two
//! boundary-spanning sub-trajectories at every merge.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::LogDensity;

/// Energy error above which a transition is flagged as divergent.
pub const MAX_DELTA_H: f64 = 1000.0;

#[derive(Debug, Clone)]
pub(crate) struct Point {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

impl Point {
    pub fn new<T: LogDensity + ?Sized>(target: &T, q: Vec<f64>) -> Self {
        let dim = q.len();
        let mut grad = vec![0.0; dim];
        let logp = target.log_density_gradient(&q, &mut grad);
        Self {
            q,
            p: vec![0.0; dim],
            grad,
            logp,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.logp.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct TransitionInfo {
    pub divergent: bool,
    pub depth: usize,
    pub n_leapfrog: usize,
    pub accept_stat: f64,
    pub energy: f64,
}

pub(crate) struct Hamiltonian<'a, T: ?Sized> {
    pub target: &'a T,
    pub inv_mass: &'a [f64],
}

impl<T: LogDensity + ?Sized> Hamiltonian<'_, T> {
    pub fn energy(&self, z: &Point) -> f64 {
        let kinetic: f64 = z
            .p
            .iter()
            .zip(self.inv_mass)
            .map(|(p, m)| p * p * m)
            .sum();
        let h = -z.logp + 0.5 * kinetic;
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    pub fn sample_momentum<R: Rng + ?Sized>(&self, z: &mut Point, rng: &mut R) {
        for (p, m) in z.p.iter_mut().zip(self.inv_mass) {
            let n: f64 = StandardNormal.sample(rng);
            *p = n / m.sqrt();
        }
    }

    fn velocity(&self, z: &Point, out: &mut [f64]) {
        for ((o, p), m) in out.iter_mut().zip(&z.p).zip(self.inv_mass) {
            *o = p * m;
        }
    }

    pub fn leapfrog(&self, z: &mut Point, eps: f64) {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(self.inv_mass) {
            *q += eps * m * p;
        }
        z.logp = self.target.log_density_gradient(&z.q, &mut z.grad);
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

/// [`no_u_turn`] with `rho = a + b`.
fn no_u_turn_sum(p_sharp_minus: &[f64], p_sharp_plus: &[f64], a: &[f64], b: &[f64]) -> bool {
    dot(p_sharp_plus, a) + dot(p_sharp_plus, b) > 0.0
        && dot(p_sharp_minus, a) + dot(p_sharp_minus, b) > 0.0
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

fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn sum(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Buffers for one level of the recursive tree build.
struct Scratch {
    p_init_end: Vec<f64>,
    p_sharp_init_end: Vec<f64>,
    rho_init: Vec<f64>,
    z_propose_final: Point,
    p_final_beg: Vec<f64>,
    p_sharp_final_beg: Vec<f64>,
    rho_final: Vec<f64>,
}

impl Scratch {
    fn new(z: &Point) -> Self {
        let dim = z.q.len();
        Self {
            p_init_end: vec![0.0; dim],
            p_sharp_init_end: vec![0.0; dim],
            rho_init: vec![0.0; dim],
            z_propose_final: z.clone(),
            p_final_beg: vec![0.0; dim],
            p_sharp_final_beg: vec![0.0; dim],
            rho_final: vec![0.0; dim],
        }
    }

    fn reset(&mut self, z: &Point) {
        self.rho_init.iter_mut().for_each(|v| *v = 0.0);
        self.rho_final.iter_mut().for_each(|v| *v = 0.0);
        self.z_propose_final.clone_from(z);
    }
}

struct TreeStats {
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

pub(crate) struct Nuts<'a, T: ?Sized> {
    pub ham: Hamiltonian<'a, T>,
    pub step_size: f64,
    pub max_depth: usize,
}

impl<T: LogDensity + ?Sized> Nuts<'_, T> {
    /// One NUTS transition starting from `current` (whose momentum is
    /// resampled). On return `current` holds the selected point.
    pub fn transition<R: Rng + ?Sized>(&self, current: &mut Point, rng: &mut R) -> TransitionInfo {
        self.ham.sample_momentum(current, rng);
        let dim = current.q.len();
        let h0 = self.ham.energy(current);

        let mut z_fwd = current.clone();
        let mut z_bck = current.clone();
        let mut z_sample = current.clone();
        let mut z_propose = current.clone();

        let mut p_sharp = vec![0.0; dim];
        self.ham.velocity(current, &mut p_sharp);
        let mut p_fwd_fwd = current.p.clone();
        let mut p_sharp_fwd_fwd = p_sharp.clone();
        let mut p_fwd_bck = current.p.clone();
        let mut p_sharp_fwd_bck = p_sharp.clone();
        let mut p_bck_fwd = current.p.clone();
        let mut p_sharp_bck_fwd = p_sharp.clone();
        let mut p_bck_bck = current.p.clone();
        let mut p_sharp_bck_bck = p_sharp;

        let mut rho = current.p.clone();
        let mut log_sum_weight = 0.0;
        let mut stats = TreeStats {
            n_leapfrog: 0,
            sum_metro_prob: 0.0,
            divergent: false,
        };
        let mut depth = 0;
        let mut scratch: Vec<Scratch> = Vec::new();

        while depth < self.max_depth {
            if scratch.len() < depth {
                scratch.push(Scratch::new(current));
            }
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut log_sum_weight_subtree = f64::NEG_INFINITY;

            let valid_subtree = if rng.random::<f64>() > 0.5 {
                rho_bck.copy_from_slice(&rho);
                p_bck_fwd.copy_from_slice(&p_fwd_bck);
                p_sharp_bck_fwd.copy_from_slice(&p_sharp_fwd_bck);
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
                    &mut log_sum_weight_subtree,
                    &mut scratch,
                    rng,
                )
            } else {
                rho_fwd.copy_from_slice(&rho);
                p_fwd_bck.copy_from_slice(&p_bck_fwd);
                p_sharp_fwd_bck.copy_from_slice(&p_sharp_bck_fwd);
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
                    &mut log_sum_weight_subtree,
                    &mut scratch,
                    rng,
                )
            };
            if !valid_subtree {
                break;
            }
            depth += 1;

            if log_sum_weight_subtree > log_sum_weight {
                z_sample.clone_from(&z_propose);
            } else {
                let accept_prob = (log_sum_weight_subtree - log_sum_weight).exp();
                if rng.random::<f64>() < accept_prob {
                    z_sample.clone_from(&z_propose);
                }
            }
            log_sum_weight = log_sum_exp(log_sum_weight, log_sum_weight_subtree);

            rho = sum(&rho_bck, &rho_fwd);
            let mut persist = no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
            persist &= no_u_turn_sum(&p_sharp_bck_bck, &p_sharp_fwd_bck, &rho_bck, &p_fwd_bck);
            persist &= no_u_turn_sum(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &rho_fwd, &p_bck_fwd);
            if !persist {
                break;
            }
        }

        let accept_stat = if stats.n_leapfrog > 0 {
            stats.sum_metro_prob / stats.n_leapfrog as f64
        } else {
            0.0
        };
        current.clone_from(&z_sample);
        TransitionInfo {
            divergent: stats.divergent,
            depth,
            n_leapfrog: stats.n_leapfrog,
            accept_stat,
            energy: self.ham.energy(current),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree<R: Rng + ?Sized>(
        &self,
        depth: usize,
        z: &mut Point,
        z_propose: &mut Point,
        p_sharp_beg: &mut [f64],
        p_sharp_end: &mut [f64],
        rho: &mut [f64],
        p_beg: &mut [f64],
        p_end: &mut [f64],
        h0: f64,
        sign: f64,
        stats: &mut TreeStats,
        log_sum_weight: &mut f64,
        scratch: &mut [Scratch],
        rng: &mut R,
    ) -> bool {
        if depth == 0 {
            self.ham.leapfrog(z, sign * self.step_size);
            stats.n_leapfrog += 1;
            let h = self.ham.energy(z);
            if h - h0 > MAX_DELTA_H {
                stats.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, h0 - h);
            stats.sum_metro_prob += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            z_propose.clone_from(z);
            self.ham.velocity(z, p_sharp_beg);
            p_sharp_end.copy_from_slice(p_sharp_beg);
            add_assign(rho, &z.p);
            p_beg.copy_from_slice(&z.p);
            p_end.copy_from_slice(&z.p);
            return !stats.divergent;
        }

        let (lower, level) = scratch.split_at_mut(depth - 1);
        let ws = &mut level[0];
        ws.reset(z);

        let mut log_sum_weight_init = f64::NEG_INFINITY;
        let valid_init = self.build_tree(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut ws.p_sharp_init_end,
            &mut ws.rho_init,
            p_beg,
            &mut ws.p_init_end,
            h0,
            sign,
            stats,
            &mut log_sum_weight_init,
            lower,
            rng,
        );
        if !valid_init {
            return false;
        }

        ws.z_propose_final.clone_from(z);
        let mut log_sum_weight_final = f64::NEG_INFINITY;
        let valid_final = self.build_tree(
            depth - 1,
            z,
            &mut ws.z_propose_final,
            &mut ws.p_sharp_final_beg,
            p_sharp_end,
            &mut ws.rho_final,
            &mut ws.p_final_beg,
            p_end,
            h0,
            sign,
            stats,
            &mut log_sum_weight_final,
            lower,
            rng,
        );
        if !valid_final {
            return false;
        }

        let log_sum_weight_subtree = log_sum_exp(log_sum_weight_init, log_sum_weight_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, log_sum_weight_subtree);
        if log_sum_weight_final > log_sum_weight_subtree {
            z_propose.clone_from(&ws.z_propose_final);
        } else {
            let accept_prob = (log_sum_weight_final - log_sum_weight_subtree).exp();
            if rng.random::<f64>() < accept_prob {
                z_propose.clone_from(&ws.z_propose_final);
            }
        }

        add_assign(rho, &ws.rho_init);
        add_assign(rho, &ws.rho_final);

        let mut persist = no_u_turn_sum(p_sharp_beg, p_sharp_end, &ws.rho_init, &ws.rho_final);
        persist &= no_u_turn_sum(p_sharp_beg, &ws.p_sharp_final_beg, &ws.rho_init, &ws.p_final_beg);
        persist &= no_u_turn_sum(&ws.p_sharp_init_end, p_sharp_end, &ws.rho_final, &ws.p_init_end);
        persist
    }
}

/// Heuristic starting step size: doubles or halves `eps` until a single
/// leapfrog step crosses an acceptance probability of 0.8.
pub(crate) fn find_reasonable_step_size<T: LogDensity + ?Sized, R: Rng + ?Sized>(
    ham: &Hamiltonian<'_, T>,
    start: &Point,
    mut eps: f64,
    rng: &mut R,
) -> Option<f64> {
    let threshold = 0.8f64.ln();
    let delta = |eps: f64, rng: &mut R| {
        let mut z = start.clone();
        ham.sample_momentum(&mut z, rng);
        let h0 = ham.energy(&z);
        ham.leapfrog(&mut z, eps);
        h0 - ham.energy(&z)
    };
    let direction = if delta(eps, rng) > threshold { 1 } else { -1 };
    loop {
        let d = delta(eps, rng);
        if direction == 1 && !(d > threshold) {
            break;
        }
        if direction == -1 && !(d < threshold) {
            break;
        }
        eps = if direction == 1 { 2.0 * eps } else { 0.5 * eps };
        if !(eps <= 1e7) || eps == 0.0 {
            return None;
        }
    }
    Some(eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::tests_support::StdNormal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn leapfrog_is_reversible() {
        let target = StdNormal { dim: 3, scale: vec![1.0, 2.0, 0.5] };
        let inv_mass = vec![1.0, 1.5, 0.7];
        let ham = Hamiltonian { target: &target, inv_mass: &inv_mass };
        let mut z = Point::new(&target, vec![0.3, -1.2, 0.8]);
        z.p = vec![0.9, 0.1, -0.4];
        let start = z.clone();
        for _ in 0..25 {
            ham.leapfrog(&mut z, 0.1);
        }
        for p in &mut z.p {
            *p = -*p;
        }
        for _ in 0..25 {
            ham.leapfrog(&mut z, 0.1);
        }
        for (a, b) in z.q.iter().zip(&start.q) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0), "{a} vs {b}");
        }
        for (a, b) in z.p.iter().zip(&start.p) {
            assert!((-a - b).abs() <= 1e-8 * b.abs().max(1.0));
        }
    }

    #[test]
    fn energy_error_is_third_order_per_step() {
        let target = StdNormal { dim: 2, scale: vec![1.0, 1.0] };
        let inv_mass = vec![1.0, 1.0];
        let ham = Hamiltonian { target: &target, inv_mass: &inv_mass };
        let err = |eps: f64| {
            let mut z = Point::new(&target, vec![1.0, -0.5]);
            z.p = vec![0.3, 0.8];
            let h0 = ham.energy(&z);
            ham.leapfrog(&mut z, eps);
            (ham.energy(&z) - h0).abs()
        };
        let ratio = err(0.02) / err(0.01);
        assert!((ratio - 8.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn reasonable_step_size_is_found() {
        let target = StdNormal { dim: 2, scale: vec![1.0, 0.01] };
        let inv_mass = vec![1.0, 1.0];
        let ham = Hamiltonian { target: &target, inv_mass: &inv_mass };
        let start = Point::new(&target, vec![0.1, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = find_reasonable_step_size(&ham, &start, 1.0, &mut rng).unwrap();
        assert!(eps < 0.1 && eps > 1e-4, "{eps}");
    }

    #[test]
    fn tree_depth_is_bounded_and_accept_stat_in_range() {
        let target = StdNormal { dim: 5, scale: vec![1.0; 5] };
        let inv_mass = vec![1.0; 5];
        let nuts = Nuts {
            ham: Hamiltonian { target: &target, inv_mass: &inv_mass },
            step_size: 0.5,
            max_depth: 10,
        };
        let mut z = Point::new(&target, vec![0.0; 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut max_hits = 0;
        for _ in 0..500 {
            let info = nuts.transition(&mut z, &mut rng);
            assert!((0.0..=1.0).contains(&info.accept_stat));
            assert!(!info.divergent);
            assert!(info.n_leapfrog >= 1 && info.n_leapfrog < 1 << (info.depth + 1));
            if info.depth >= 10 {
                max_hits += 1;
            }
        }
        assert!(max_hits <= 5);
    }
}
