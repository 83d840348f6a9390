//! Adam with bias correction, one instance per parameter group.

use crate::autograd::Var;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Replaces each parameter with its updated value. A zero learning rate
    /// leaves parameters (and the moment buffers) untouched.
    pub fn step(&mut self, params: &mut [&mut Var], grads: &[Var]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.lr == 0.0 {
            return;
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value().len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = (self.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = p.value().to_vec();
            for (((x, &gx), mi), vi) in data
                .iter_mut()
                .zip(g.value().data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gx;
                *vi = b2 * *vi + (1.0 - b2) * gx * gx;
                *x -= step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
            **p = Var::param(Tensor::new(p.shape().to_vec(), data));
        }
    }
}
