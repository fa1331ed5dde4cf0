//! Fixed-step classical Runge-Kutta integration over flat `f64` buffers.

/// Scratch space for one RK4 step of a system with `dim` states.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    /// Advance `y` in place from `t` to `t + dt`.
    ///
    /// `f(t, y, dy)` writes the derivative at `(t, y)` into `dy`.
    pub fn step<F>(&mut self, mut f: F, t: f64, y: &mut [f64], dt: f64)
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let half = 0.5 * dt;
        f(t, y, &mut self.k1);
        for i in 0..y.len() {
            self.tmp[i] = y[i] + half * self.k1[i];
        }
        f(t + half, &self.tmp, &mut self.k2);
        for i in 0..y.len() {
            self.tmp[i] = y[i] + half * self.k2[i];
        }
        f(t + half, &self.tmp, &mut self.k3);
        for i in 0..y.len() {
            self.tmp[i] = y[i] + dt * self.k3[i];
        }
        f(t + dt, &self.tmp, &mut self.k4);
        let sixth = dt / 6.0;
        for i in 0..y.len() {
            y[i] += sixth * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Number of whole steps of size `dt` in `span`, or `None` when `dt` does not divide it.
pub fn whole_steps(span: f64, dt: f64) -> Option<usize> {
    if !(dt > 0.0) || !span.is_finite() || span < 0.0 {
        return None;
    }
    let n = (span / dt).round();
    if (n * dt - span).abs() <= 1e-9 * span.max(dt) {
        Some(n as usize)
    } else {
        None
    }
}

/// Composite trapezoid rule on samples with uniform spacing `h`.
pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => h * (0.5 * (values[0] + values[n - 1]) + values[1..n - 1].iter().sum::<f64>()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rk4_integrates_exponential() {
        let mut rk = Rk4::new(1);
        let mut y = [1.0];
        let dt = 0.01;
        for n in 0..100 {
            rk.step(|_, y, dy| dy[0] = y[0], n as f64 * dt, &mut y, dt);
        }
        assert!((y[0] - 1f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn whole_steps_detects_divisibility() {
        assert_eq!(whole_steps(1.0, 1e-3), Some(1000));
        assert_eq!(whole_steps(0.02, 1e-3), Some(20));
        assert_eq!(whole_steps(1.0, 0.3), None);
        assert_eq!(whole_steps(0.0, 1e-3), Some(0));
    }

    #[test]
    fn trapezoid_is_exact_for_lines() {
        let v: Vec<f64> = (0..=10).map(|i| 2.0 * i as f64 / 10.0 + 1.0).collect();
        assert!((trapezoid(&v, 0.1) - 2.0).abs() < 1e-14);
    }
}
