//! Trained network weights with their provenance, stored as an `LMN1` file.

use std::path::Path;

use serde_json::Value;

use crate::autograd::ParamSet;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::nets::{assemble, NetConfig, NetKind, Network};

#[derive(Debug, Clone)]
pub struct WeightStore {
    pub kind: NetKind,
    pub config: NetConfig,
    pub params: ParamSet<f32>,
    pub seed: u64,
    pub steps: u64,
}

impl WeightStore {
    pub fn from_network(net: &Network<f32>, seed: u64, steps: u64) -> Self {
        WeightStore {
            kind: net.kind(),
            config: net.config().clone(),
            params: net.params.clone(),
            seed,
            steps,
        }
    }

    /// Takes the parameters over instead of copying them.
    pub fn from_owned(net: Network<f32>, seed: u64, steps: u64) -> Self {
        WeightStore { kind: net.kind(), config: net.config().clone(), params: net.params, seed, steps }
    }

    pub fn into_network(self) -> Result<Network<f32>> {
        assemble(self.kind, &self.config, self.params)
    }

    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn to_container(&self) -> Container {
        container(self.kind, &self.config, &self.params, self.seed, self.steps)
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let field = |key: &str| -> Result<&Value> {
            c.metadata
                .get(key)
                .ok_or_else(|| Error::Incompatible(format!("weight file lacks {key:?} metadata")))
        };
        let kind: NetKind = serde_json::from_value(field("kind")?.clone())
            .map_err(|e| Error::Incompatible(format!("bad network kind: {e}")))?;
        let config: NetConfig = serde_json::from_value(field("net_config")?.clone())
            .map_err(|e| Error::Incompatible(format!("bad network config: {e}")))?;
        let stored = field("config_hash")?.as_str().unwrap_or_default().to_string();
        if stored != config.hash() {
            return Err(Error::Incompatible(format!(
                "config hash {stored} does not match the stored config ({})",
                config.hash()
            )));
        }
        let seed = field("seed")?.as_u64().ok_or_else(|| Error::Incompatible("seed is not an integer".into()))?;
        let steps = field("steps")?.as_u64().ok_or_else(|| Error::Incompatible("steps is not an integer".into()))?;
        let mut params = ParamSet::new();
        for (name, t) in c.tensors {
            params.add(name, t)?;
        }
        Ok(WeightStore { kind, config, params, seed, steps })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

fn container(kind: NetKind, config: &NetConfig, params: &ParamSet<f32>, seed: u64, steps: u64) -> Container {
    let mut c = Container::new()
        .meta("kind", serde_json::to_value(kind).expect("kind serializes"))
        .meta("net_config", serde_json::to_value(config).expect("config serializes"))
        .meta("config_hash", config.hash())
        .meta("seed", seed)
        .meta("steps", steps);
    for p in params.iter() {
        c.push(p.name.clone(), p.value.clone());
    }
    c
}

/// Writes a network's weights without first copying it into a store.
pub fn save_network(net: &Network<f32>, seed: u64, steps: u64, path: impl AsRef<Path>) -> Result<()> {
    container(net.kind(), net.config(), &net.params, seed, steps).save(path)
}

/// Loads a weight file and checks it holds a network of the expected kind.
pub fn load_network(path: impl AsRef<Path>, kind: NetKind) -> Result<(Network<f32>, u64, u64)> {
    let store = WeightStore::load(path.as_ref())?;
    if store.kind != kind {
        return Err(Error::Incompatible(format!(
            "{} holds a {:?}, expected a {kind:?}",
            path.as_ref().display(),
            store.kind
        )));
    }
    let (seed, steps) = (store.seed, store.steps);
    Ok((store.into_network()?, seed, steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::build_snet;
    use crate::tensor::Tensor;

    fn tiny() -> NetConfig {
        NetConfig {
            patch_height: 8,
            patch_width: 8,
            num_classes: 3,
            num_boundaries: 2,
            base_channels: 2,
            levels: 1,
            rnet_head_channels: 1,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = build_snet::<f32>(&tiny(), 11).unwrap();
        let store = WeightStore::from_network(&net, 11, 42);
        let bytes = store.to_container().to_bytes();
        let back = WeightStore::from_container(Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!((back.seed, back.steps), (11, 42));
        assert_eq!(back.config_hash(), tiny().hash());
        let x = Tensor::from_fn(&[1, 8, 8], |i| (i as f32 * 0.37).sin());
        let a = net.snet_forward(&x).unwrap();
        let b = back.into_network().unwrap().snet_forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn tampered_config_rejected() {
        let net = build_snet::<f32>(&tiny(), 1).unwrap();
        let mut c = WeightStore::from_network(&net, 1, 0).to_container();
        c.metadata.insert("config_hash".into(), "0000".into());
        assert!(matches!(WeightStore::from_container(c), Err(Error::Incompatible(_))));
    }

    #[test]
    fn missing_tensor_rejected() {
        let net = build_snet::<f32>(&tiny(), 1).unwrap();
        let mut store = WeightStore::from_network(&net, 1, 0);
        let mut c = store.to_container();
        c.take("head.bias");
        store = WeightStore::from_container(c).unwrap();
        assert!(store.into_network().is_err());
    }
}
