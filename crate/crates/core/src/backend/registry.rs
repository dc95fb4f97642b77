use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{MockBackend, MockParams, MockScene, VisionLanguageBackend};
use crate::error::{Error, Result};

/// Which backend to load and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub name: String,
    /// Weights location for real models.
    pub weights: Option<PathBuf>,
    /// Parameters of the mock backend; ignored by other backends.
    pub mock: MockParams,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            name: "mock".into(),
            weights: None,
            mock: MockParams::default(),
        }
    }
}

/// Per-image information some backends need at construction time.
#[derive(Clone, Debug, Default)]
pub struct SceneContext {
    /// Ground truth for weight-free backends.
    pub scene: Option<MockScene>,
}

pub type BackendFactory =
    Box<dyn Fn(&BackendConfig, &SceneContext) -> Result<Box<dyn VisionLanguageBackend>> + Send + Sync>;

/// Backends keyed by name.
pub struct BackendRegistry {
    factories: BTreeMap<String, BackendFactory>,
}

impl BackendRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    /// Registry holding the built-in `mock` backend.
    pub fn standard() -> Self {
        let mut registry = Self::empty();
        registry.register("mock", |config, context| {
            let scene = context.scene.clone().ok_or_else(|| {
                Error::BackendUnavailable("the mock backend needs a ground-truth scene".into())
            })?;
            Ok(Box::new(MockBackend::new(scene, config.mock.clone())?))
        });
        registry
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&BackendConfig, &SceneContext) -> Result<Box<dyn VisionLanguageBackend>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn create(&self, config: &BackendConfig, context: &SceneContext) -> Result<Box<dyn VisionLanguageBackend>> {
        let factory = self.factories.get(&config.name).ok_or_else(|| {
            Error::BackendUnavailable(format!(
                "unknown backend {:?} (registered: {})",
                config.name,
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        factory(config, context)
    }
}

impl Default for BackendRegistry {
    fn default() -> Self {
        Self::standard()
    }
}
