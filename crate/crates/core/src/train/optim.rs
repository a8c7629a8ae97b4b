use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 0.001, momentum: 0.9, weight_decay: 0.0001 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("optimizer hyperparameters must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// SGD with classical momentum; one velocity tensor per trainable
/// parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T: Element = f32> {
    pub config: OptimConfig,
    pub velocity: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Element> OptimState<T> {
    pub fn new(config: OptimConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let velocity =
            store.trainable_ids().map(|id| Ok((id, Tensor::zeros(store.value(id).shape())?))).collect::<Result<_>>()?;
        Ok(Self { config, velocity })
    }

    pub fn velocity_of(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.velocity.iter().find(|(v, _)| *v == id).map(|(_, t)| t)
    }
}

/// g' = g + wd·θ; v ← m·v + g'; θ ← θ − lr·v. Parameters without a
/// gradient are treated as having a zero gradient.
pub fn sgd_step<T: Element>(
    store: &mut ParamStore<T>,
    grads: &[(ParamId, Tensor<T>)],
    state: &mut OptimState<T>,
) -> Result<()> {
    let lr = T::lit(state.config.lr);
    let m = T::lit(state.config.momentum);
    let wd = T::lit(state.config.weight_decay);
    for (id, v) in state.velocity.iter_mut() {
        let grad = grads.iter().find(|(g, _)| g == id).map(|(_, g)| g);
        let theta = store.value_mut(*id);
        if theta.shape() != v.shape() || grad.is_some_and(|g| g.shape() != v.shape()) {
            return Err(Error::State(format!(
                "shape mismatch in optimizer step for parameter {}: value {:?}, velocity {:?}",
                id.index(),
                theta.shape(),
                v.shape()
            )));
        }
        let theta = theta.data_mut();
        let vel = v.data_mut();
        match grad {
            Some(g) => {
                for ((t, vi), &gi) in theta.iter_mut().zip(vel.iter_mut()).zip(g.data()) {
                    *vi = m * *vi + (gi + wd * *t);
                    *t -= lr * *vi;
                }
            }
            None => {
                for (t, vi) in theta.iter_mut().zip(vel.iter_mut()) {
                    *vi = m * *vi + wd * *t;
                    *t -= lr * *vi;
                }
            }
        }
    }
    Ok(())
}
