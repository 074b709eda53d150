//! SGD with heavy-ball momentum and L2 weight decay.

use crate::error::Result;
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: ParamStore,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        }
    }

    /// `g += wd * theta; v = mu * v + g; theta -= lr * v`
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        params.check_structure(grads)?;
        params.check_structure(&self.velocity)?;
        for ((p, g), v) in params
            .params_mut()
            .iter_mut()
            .zip(grads.params())
            .zip(self.velocity.params_mut())
        {
            for ((pv, gv), vv) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
                let g = gv + self.weight_decay * *pv;
                *vv = self.momentum * *vv + g;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_steps_by_hand() {
        let mut p = ParamStore::new();
        p.add("w", vec![1], vec![1.0]);
        let mut g = p.zeros_like();
        g.params_mut()[0].data[0] = 0.5;
        let mut opt = Sgd::new(&p, 0.9, 0.1);
        opt.step(&mut p, &g, 0.1).unwrap();
        // g' = 0.5 + 0.1 = 0.6, v = 0.6, w = 1 - 0.06
        assert!((p.params()[0].data[0] - 0.94).abs() < 1e-15);
        opt.step(&mut p, &g, 0.1).unwrap();
        // g' = 0.5 + 0.094 = 0.594, v = 0.54 + 0.594 = 1.134, w = 0.94 - 0.1134
        assert!((p.params()[0].data[0] - 0.8266).abs() < 1e-12);
    }
}
