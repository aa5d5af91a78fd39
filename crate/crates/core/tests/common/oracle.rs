//! Scalar reference implementations. They use plain nested `Vec`s, `cosh`
//! and `exp` directly, and share nothing with the library besides the data.

/// Model as nested vectors: `a[i][r]`, `b[j][r]`, `c[k][r]`, biases.
#[derive(Debug, Clone)]
pub struct ScalarModel {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub u: Vec<f64>,
    pub f: Vec<f64>,
    pub d: Vec<f64>,
}

impl ScalarModel {
    pub fn predict(&self, i: usize, j: usize, k: usize) -> f64 {
        let mut s = 0.0;
        for r in 0..self.a[i].len() {
            s += self.a[i][r] * self.b[j][r] * self.c[k][r];
        }
        s + self.u[i] + self.f[j] + self.d[k]
    }

    /// Objective with ½ over squared error plus per-entry regularizer.
    pub fn loss(&self, entries: &[(usize, usize, usize, f64)], lambda: f64) -> f64 {
        let mut total = 0.0;
        for &(i, j, k, y) in entries {
            let e = y - self.predict(i, j, k);
            let mut reg = 0.0;
            for r in 0..self.a[i].len() {
                reg += self.a[i][r].powi(2) + self.b[j][r].powi(2) + self.c[k][r].powi(2);
            }
            reg += self.u[i].powi(2) + self.f[j].powi(2) + self.d[k].powi(2);
            total += 0.5 * (e * e + lambda * reg);
        }
        total
    }

    /// One simultaneous update of all six blocks for one entry, driven by `err`.
    pub fn update(&mut self, i: usize, j: usize, k: usize, err: f64, eta: f64, lambda: f64) {
        let a_old = self.a[i].clone();
        let b_old = self.b[j].clone();
        let c_old = self.c[k].clone();
        for r in 0..a_old.len() {
            self.a[i][r] = a_old[r] + eta * (err * b_old[r] * c_old[r] - lambda * a_old[r]);
            self.b[j][r] = b_old[r] + eta * (err * a_old[r] * c_old[r] - lambda * b_old[r]);
            self.c[k][r] = c_old[r] + eta * (err * a_old[r] * b_old[r] - lambda * c_old[r]);
        }
        let (u, f, d) = (self.u[i], self.f[j], self.d[k]);
        self.u[i] = u + eta * (err - lambda * u);
        self.f[j] = f + eta * (err - lambda * f);
        self.d[k] = d + eta * (err - lambda * d);
    }
}

/// Nine gains in `Kp1 Kp2 Kp3 Ki1 Ki2 Kd1 Kd2 Kd3 Kd4` order.
pub fn refined_error(gains: &[f64; 9], e: f64, integral: f64, prev: f64) -> f64 {
    let [kp1, kp2, kp3, ki1, ki2, kd1, kd2, kd3, kd4] = *gains;
    let kp = kp1 + kp2 * (1.0 - 1.0 / (kp3 * e).cosh());
    let ki = ki1 / (ki2 * e).cosh();
    let kd = kd1 + kd2 / (1.0 + kd3 * (kd4 * e).exp());
    kp * e + ki * integral + kd * (e - prev)
}

/// Per-entry controller memory keyed by entry position in `entries`.
#[derive(Debug, Clone, Default)]
pub struct ScalarController {
    pub integral: Vec<f64>,
    pub prev: Vec<f64>,
}

/// One controller-refined SGD epoch visiting `entries` in `order`.
pub fn npid_epoch(
    model: &mut ScalarModel,
    entries: &[(usize, usize, usize, f64)],
    order: &[usize],
    gains: &[f64; 9],
    memory: &mut ScalarController,
    eta: f64,
    lambda: f64,
) {
    if memory.integral.len() != entries.len() {
        memory.integral = vec![0.0; entries.len()];
        memory.prev = vec![0.0; entries.len()];
    }
    for &n in order {
        let (i, j, k, y) = entries[n];
        let e = y - model.predict(i, j, k);
        memory.integral[n] += e;
        let refined = refined_error(gains, e, memory.integral[n], memory.prev[n]);
        memory.prev[n] = e;
        model.update(i, j, k, refined, eta, lambda);
    }
}

/// One plain SGD epoch.
pub fn plain_epoch(
    model: &mut ScalarModel,
    entries: &[(usize, usize, usize, f64)],
    order: &[usize],
    eta: f64,
    lambda: f64,
) {
    for &n in order {
        let (i, j, k, y) = entries[n];
        let e = y - model.predict(i, j, k);
        model.update(i, j, k, e, eta, lambda);
    }
}

/// Sums after sorting ascending by magnitude.
pub fn sorted_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|x, y| x.abs().partial_cmp(&y.abs()).unwrap());
    v.iter().sum()
}
