use crate::error::{contract, Result};
use crate::params::ParamStore;

pub const DEFAULT_EMA_DECAY: f64 = 0.999;

/// Exponential moving average of a parameter store.
#[derive(Clone)]
pub struct EmaState {
    shadow: ParamStore,
    decay: f64,
    updates: u64,
}

impl EmaState {
    /// Starts the shadow as an exact copy of `live`.
    pub fn new(live: &ParamStore, decay: f64) -> Result<Self> {
        Self::from_shadow(live.deep_clone()?, decay, 0)
    }

    pub fn from_shadow(shadow: ParamStore, decay: f64, updates: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(crate::Error::Config(format!("EMA decay {decay} outside [0, 1]")));
        }
        Ok(Self {
            shadow,
            decay,
            updates,
        })
    }

    pub fn shadow(&self) -> &ParamStore {
        &self.shadow
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// `shadow <- decay * shadow + (1 - decay) * live`, element-wise.
    pub fn update(&mut self, live: &ParamStore) -> Result<()> {
        let live_vars = live.named_vars();
        let shadow_vars = self.shadow.named_vars();
        if live_vars.len() != shadow_vars.len() {
            return Err(contract(format!(
                "EMA tracks {} tensors, model has {}",
                shadow_vars.len(),
                live_vars.len()
            )));
        }
        for ((ln, lv), (sn, sv)) in live_vars.iter().zip(&shadow_vars) {
            if ln != sn || lv.dims() != sv.dims() {
                return Err(contract(format!(
                    "EMA entry {sn} {:?} does not mirror {ln} {:?}",
                    sv.dims(),
                    lv.dims()
                )));
            }
            let next = (sv.as_tensor().affine(self.decay, 0.0)?
                + lv.as_tensor().affine(1.0 - self.decay, 0.0)?)?;
            sv.set(&next)?;
        }
        self.updates += 1;
        Ok(())
    }
}
