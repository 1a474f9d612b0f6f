//! Checkpoint files.

use std::collections::BTreeMap;
use std::path::Path;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelConfig};
use crate::optim::AdamState;
use crate::tensor::Real;

const KIND: &str = "checkpoint";
const FIRST_MOMENT: &str = "adam.first/";
const SECOND_MOMENT: &str = "adam.second/";

impl<T: Real> Checkpoint<T> {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.set_meta("kind", KIND);
        c.set_meta("dtype", T::DTYPE.name());
        self.config.write_meta(&mut c);
        c.set_meta("step", self.step);
        for (name, t) in &self.params {
            c.push_tensor(name, t)?;
        }
        if let Some(state) = &self.optimizer {
            c.set_meta("adam_t", state.t);
            for (name, t) in &state.first {
                c.push_tensor(&format!("{FIRST_MOMENT}{name}"), t)?;
            }
            for (name, t) in &state.second {
                c.push_tensor(&format!("{SECOND_MOMENT}{name}"), t)?;
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta("kind") != Some(KIND) {
            return Err(Error::Format("container is not a checkpoint".into()));
        }
        let config = ModelConfig::read_meta(c)?;
        let step = c
            .require_meta("step")?
            .parse()
            .map_err(|_| Error::Format("bad step".into()))?;
        let mut params = BTreeMap::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for name in c.tensor_names() {
            let t = c.tensor::<T>(name)?;
            if let Some(p) = name.strip_prefix(FIRST_MOMENT) {
                first.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix(SECOND_MOMENT) {
                second.insert(p.to_string(), t);
            } else {
                params.insert(name.to_string(), t);
            }
        }
        let optimizer = match c.meta("adam_t") {
            Some(t) => Some(AdamState {
                t: t.parse().map_err(|_| Error::Format("bad adam_t".into()))?,
                first,
                second,
            }),
            None => None,
        };
        let ckpt = Checkpoint {
            config,
            step,
            params,
            optimizer,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    /// Loads a checkpoint, converting stored values to `T`.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    #[test]
    fn save_load_save_is_byte_identical() {
        let config = ModelConfig::new(2, &[1, 3], &[4, 8]).unwrap();
        let mut ck: Checkpoint<f32> = init_weights(&config, 5).unwrap();
        ck.step = 17;
        ck.optimizer = Some(AdamState::zeros_like(&ck.params));
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.mkpn");
        let b = dir.path().join("b.mkpn");
        ck.save(&a).unwrap();
        let loaded = Checkpoint::<f32>::load(&a).unwrap();
        assert_eq!(loaded, ck);
        loaded.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn rejects_non_checkpoint() {
        let mut c = Container::new();
        c.set_meta("kind", "sample");
        assert!(Checkpoint::<f64>::from_container(&c).is_err());
    }
}
