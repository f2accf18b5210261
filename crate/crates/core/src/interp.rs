//! Monotone piecewise-cubic Hermite interpolation (Fritsch–Carlson).

#[derive(Debug, Clone, PartialEq)]
pub struct Pchip {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl Pchip {
    /// `xs` must be strictly increasing with at least two entries.
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        let n = xs.len();
        assert!(n >= 2 && ys.len() == n, "pchip needs matching abscissae and values");
        let d: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i])).collect();
        let mut m = vec![0.0; n];
        if n == 2 {
            m = vec![d[0], d[0]];
        } else {
            for i in 1..n - 1 {
                if d[i - 1] * d[i] > 0.0 {
                    let h0 = xs[i] - xs[i - 1];
                    let h1 = xs[i + 1] - xs[i];
                    let w1 = 2.0 * h1 + h0;
                    let w2 = h1 + 2.0 * h0;
                    m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
                }
            }
            let h = |i: usize| xs[i + 1] - xs[i];
            m[0] = end_slope(h(0), h(1), d[0], d[1]);
            m[n - 1] = end_slope(h(n - 2), h(n - 3), d[n - 2], d[n - 3]);
        }
        Self { xs, ys, slopes: m }
    }

    /// Overrides the end slopes.
    pub fn with_end_slopes(mut self, first: f64, last: f64) -> Self {
        let n = self.slopes.len();
        self.slopes[0] = first;
        self.slopes[n - 1] = last;
        self
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    /// Constant below the first knot, linear beyond the last.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1] + self.slopes[n - 1] * (x - self.xs[n - 1]);
        }
        let i = self.xs.partition_point(|&v| v <= x) - 1;
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (t2, t3) = (t * t, t * t * t);
        (2.0 * t3 - 3.0 * t2 + 1.0) * self.ys[i]
            + (t3 - 2.0 * t2 + t) * h * self.slopes[i]
            + (-2.0 * t3 + 3.0 * t2) * self.ys[i + 1]
            + (t3 - t2) * h * self.slopes[i + 1]
    }
}

/// Shape-preserving three-point end condition.
fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if m * d0 <= 0.0 {
        0.0
    } else if d0 * d1 < 0.0 && m.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_knots_and_linear_data() {
        let p = Pchip::new(vec![0.0, 1.0, 3.0, 4.0], vec![1.0, 3.0, 7.0, 9.0]);
        for (x, y) in [(0.0, 1.0), (1.0, 3.0), (2.0, 5.0), (3.5, 8.0), (4.0, 9.0)] {
            assert!((p.eval(x) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn monotone_data_gives_monotone_curve() {
        let p = Pchip::new(vec![0.0, 1.0, 2.0, 3.0, 5.0], vec![0.0, 0.1, 2.0, 2.05, 4.0]);
        let v: Vec<f64> = (0..=500).map(|i| p.eval(i as f64 * 0.01)).collect();
        assert!(v.windows(2).all(|w| w[1] >= w[0]));
    }
}
