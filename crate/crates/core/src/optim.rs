use crate::layers::Module;
use crate::tensor::Scalar;

/// Adam with bias-corrected moment estimates.
///
/// Moment buffers are matched to parameters by visiting order, which is fixed for a
/// given model structure.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step<T: Scalar>(&mut self, model: &mut (impl Module<T> + ?Sized)) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let mut slot = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut(&mut |p| {
            if !p.trainable {
                return;
            }
            if ms.len() <= slot {
                ms.push(vec![0.0; p.len()]);
                vs.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut ms[slot], &mut vs[slot]);
            assert_eq!(m.len(), p.len(), "parameter layout changed between steps");
            for i in 0..p.len() {
                let g = p.grad[i].as_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p.value[i] -= T::lit(update);
                p.grad[i] = T::zero();
            }
            slot += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Param;

    struct Quadratic {
        p: Param<f64>,
    }

    impl Module<f64> for Quadratic {
        fn visit(&self, f: &mut dyn FnMut(&Param<f64>)) {
            f(&self.p)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.p)
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr * sign(g) (up to eps).
        let mut q = Quadratic {
            p: Param::new("p", vec![2], vec![1.0, -1.0]),
        };
        q.p.grad = vec![4.0, -0.25];
        let mut opt = Adam::new(0.1);
        opt.step(&mut q);
        assert!((q.p.value[0] - 0.9).abs() < 1e-6);
        assert!((q.p.value[1] + 0.9).abs() < 1e-6);
        assert_eq!(q.p.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn minimises_quadratic() {
        let mut q = Quadratic {
            p: Param::new("p", vec![1], vec![3.0]),
        };
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            q.p.grad[0] = 2.0 * (q.p.value[0] - 0.5);
            opt.step(&mut q);
        }
        assert!((q.p.value[0] - 0.5).abs() < 1e-3);
    }
}
