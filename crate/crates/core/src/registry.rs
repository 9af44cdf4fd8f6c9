//! Name-keyed registries for the interchangeable pieces of the pipeline:
//! component kernels, fit strategies and tuning criteria.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{CossoError, Result};

type Factory<T> = Box<dyn Fn(Option<&str>) -> Result<Box<T>> + Send + Sync>;

/// Maps a strategy name to a constructor. Names may carry one argument after
/// a colon (`periodic:12`, `cv:7`), which is passed through to the factory.
pub struct Registry<T: ?Sized> {
    what: &'static str,
    factories: BTreeMap<String, Factory<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(what: &'static str) -> Self {
        Self {
            what,
            factories: BTreeMap::new(),
        }
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(Option<&str>) -> Result<Box<T>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn create(&self, spec: &str) -> Result<Box<T>> {
        let (name, arg) = match spec.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (spec, None),
        };
        let factory = self.factories.get(name).ok_or_else(|| {
            CossoError::input(format!(
                "unknown {} '{}' (known: {})",
                self.what,
                name,
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        factory(arg)
    }
}

impl<T: ?Sized> fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("what", &self.what)
            .field("names", &self.names().collect::<Vec<_>>())
            .finish()
    }
}

pub(crate) fn parse_arg<V: std::str::FromStr>(what: &str, arg: Option<&str>) -> Result<V> {
    let raw = arg.ok_or_else(|| CossoError::input(format!("{what} requires an argument")))?;
    raw.parse()
        .map_err(|_| CossoError::input(format!("bad argument '{raw}' for {what}")))
}
