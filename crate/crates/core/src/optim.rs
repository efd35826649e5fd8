//! AdamW with a cosine-annealed learning rate.

use crate::error::{shape_err, Result};
use crate::numerics::Tensor;

/// `lr * (1 + cos(pi * step / total)) / 2`, decaying to 0 at `step == total`.
pub fn cosine_lr(base: f32, step: usize, total: usize) -> f32 {
    if total == 0 {
        return base;
    }
    let progress = step as f64 / total as f64;
    (base as f64 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32
}

#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f32,
    beta2: f32,
    eps: f32,
    weight_decay: f32,
    step: u32,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    /// One moment pair per parameter tensor, in the order later passed to
    /// [`AdamW::step`].
    pub fn new(shapes: &[usize], weight_decay: f32) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: shapes
                .iter()
                .map(|&n| (vec![0.0; n], vec![0.0; n]))
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f32) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != params.len() {
            return Err(shape_err!(
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.moments.len(),
                params.len(),
                grads.len()
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            if p.len() != g.len() || m.len() != g.len() {
                return Err(shape_err!("gradient {:?} for parameter {:?}", g.dims(), p.dims()));
            }
            g.ensure_finite("gradient")?;
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
                *pv -= lr * (update + self.weight_decay * *pv);
            }
            p.ensure_finite("parameter update")?;
        }
        Ok(())
    }
}
