//! Warmup adaptation: dual-averaging step size and windowed diagonal metric.

/// Dual averaging of `log(step_size)` toward a target acceptance statistic.
#[derive(Debug, Clone)]
pub(crate) struct DualAveraging {
    mu: f64,
    target: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    pub fn new(target: f64) -> Self {
        Self {
            mu: 0.0,
            target,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    /// Restarts the averages, biasing exploration toward `10 * step_size`.
    pub fn restart(&mut self, step_size: f64) {
        self.mu = (10.0 * step_size).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Feeds one acceptance statistic, returns the next step size to try.
    pub fn update(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let accept_stat = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept_stat);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    /// Step size to freeze once warmup ends.
    pub fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Welford accumulator for per-coordinate variances.
#[derive(Debug, Clone)]
pub(crate) struct VarianceEstimator {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl VarianceEstimator {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn restart(&mut self) {
        self.n = 0.0;
        self.mean.iter_mut().for_each(|v| *v = 0.0);
        self.m2.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn add(&mut self, q: &[f64]) {
        self.n += 1.0;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(q) {
            let delta = x - *m;
            *m += delta / self.n;
            *s += delta * (x - *m);
        }
    }

    /// Sample variances shrunk toward `1e-3` with weight `5 / (n + 5)`.
    pub fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|s| {
                let var = if n > 1.0 { s / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

/// Warmup schedule: an initial fast phase (step size only), a sequence of
/// doubling slow windows (25, 50, 100, ... draws) for the metric, and a
/// terminal fast phase. The last slow window stretches to fill the gap.
#[derive(Debug, Clone)]
pub(crate) struct WindowSchedule {
    num_warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    counter: usize,
    enabled: bool,
}

impl WindowSchedule {
    pub fn new(num_warmup: usize) -> Self {
        let (mut init_buffer, mut term_buffer, mut base_window) = (75, 50, 25);
        let enabled = num_warmup >= 20;
        if enabled && init_buffer + base_window + term_buffer > num_warmup {
            init_buffer = (0.15 * num_warmup as f64) as usize;
            term_buffer = (0.1 * num_warmup as f64) as usize;
            base_window = num_warmup - (init_buffer + term_buffer);
        }
        Self {
            num_warmup,
            init_buffer,
            term_buffer,
            window_size: base_window,
            next_window: init_buffer + base_window - 1,
            counter: 0,
            enabled,
        }
    }

    fn in_window(&self) -> bool {
        self.enabled
            && self.counter >= self.init_buffer
            && self.counter < self.num_warmup - self.term_buffer
            && self.counter != self.num_warmup
    }

    fn window_ends(&self) -> bool {
        self.enabled && self.counter == self.next_window && self.counter != self.num_warmup
    }

    fn compute_next_window(&mut self) {
        let last = self.num_warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != last {
            let boundary = self.next_window + 2 * self.window_size;
            if boundary >= self.num_warmup - self.term_buffer {
                self.next_window = last;
            }
        }
    }

    /// Records one warmup draw. Returns a new inverse metric when a slow
    /// window closes.
    pub fn observe(&mut self, estimator: &mut VarianceEstimator, q: &[f64]) -> Option<Vec<f64>> {
        if self.in_window() {
            estimator.add(q);
        }
        if self.window_ends() {
            self.compute_next_window();
            let var = estimator.regularized_variance();
            estimator.restart();
            self.counter += 1;
            return Some(var);
        }
        self.counter += 1;
        None
    }
}
