//! Declarative stack construction from a JSON composition config.
//!
//! ```json
//! {
//!   "components": [
//!     {"id": "d0", "type": "block:ram", "config": {"size_blocks": 4096}},
//!     {"id": "d1", "type": "block:ram", "config": {"size_blocks": 4096}},
//!     {"id": "array", "type": "raid0", "config": {"stripe_blocks": 8}}
//!   ],
//!   "bindings": [{"from": "array", "to": ["d0", "d1"]}],
//!   "service": {"mode": "QUEUED", "queue_depth": 64}
//! }
//! ```
//!
//! Binding order is child order: `d0` is child 0 of the array.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::blockdev::BlockDevice;
use crate::component::{bind, ComponentError, ComponentRef, Registry, IBLOCK_DEVICE};
use crate::kv::KvStore;
use crate::service::{ServiceConfig, ServiceMode};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ComposeError {
    #[error("ParseError: {0}")]
    Parse(String),
    #[error("DuplicateId: `{0}` is defined more than once")]
    DuplicateId(String),
    #[error("CycleDetected: {0}")]
    CycleDetected(String),
    #[error("UnknownType: `{0}` is not a registered component type")]
    UnknownType(String),
    #[error("MultipleRoots: {}", .0.join(", "))]
    MultipleRoots(Vec<String>),
    #[error(transparent)]
    Component(#[from] ComponentError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub id: String,
    #[serde(rename = "type")]
    pub type_name: String,
    #[serde(default)]
    pub config: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Binding {
    pub from: String,
    pub to: Vec<String>,
}

fn default_queue_depth() -> u32 {
    256
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub mode: ServiceMode,
    /// Ring capacity per client, rounded up to a power of two. In SHM mode
    /// also the descriptor count.
    #[serde(default = "default_queue_depth")]
    pub queue_depth: u32,
    #[serde(default = "one")]
    pub service_threads: usize,
    #[serde(default)]
    pub coalesce: bool,
}

impl ServiceSpec {
    pub fn new(mode: ServiceMode) -> ServiceSpec {
        ServiceSpec {
            mode,
            queue_depth: default_queue_depth(),
            service_threads: 1,
            coalesce: false,
        }
    }

    pub fn service_config(&self) -> ServiceConfig {
        let depth = self.queue_depth.max(2);
        let mut config = ServiceConfig::new(self.mode);
        config.ring_order = depth.next_power_of_two().trailing_zeros();
        config.desc_count = depth;
        config.service_threads = self.service_threads;
        config.coalesce = self.coalesce;
        config
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    /// Plugin modules to load before resolving types.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub plugins: Vec<String>,
    pub components: Vec<ComponentSpec>,
    #[serde(default)]
    pub bindings: Vec<Binding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service: Option<ServiceSpec>,
}

/// Parse and check a config against `registry`, loading any plugins it
/// names.
pub fn parse_config(text: &str, registry: &Registry) -> Result<StackConfig, ComposeError> {
    let config = StackConfig::parse(text)?;
    config.check_types(registry)?;
    Ok(config)
}

impl StackConfig {
    /// Parse and check the graph shape. Types are not resolved.
    pub fn parse(text: &str) -> Result<StackConfig, ComposeError> {
        let config: StackConfig =
            serde_json::from_str(text).map_err(|e| ComposeError::Parse(e.to_string()))?;
        config.root()?;
        Ok(config)
    }

    pub fn emit(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn check_types(&self, registry: &Registry) -> Result<(), ComposeError> {
        for plugin in &self.plugins {
            registry.load_plugin(plugin)?;
        }
        for c in &self.components {
            if !registry.has_type(&c.type_name) {
                return Err(ComposeError::UnknownType(c.type_name.clone()));
            }
        }
        Ok(())
    }

    /// Children of each component in bind order.
    fn edges(&self) -> Result<HashMap<&str, Vec<&str>>, ComposeError> {
        let mut edges: HashMap<&str, Vec<&str>> = HashMap::new();
        for c in &self.components {
            if edges.insert(&c.id, Vec::new()).is_some() {
                return Err(ComposeError::DuplicateId(c.id.clone()));
            }
        }
        for b in &self.bindings {
            for id in std::iter::once(&b.from).chain(&b.to) {
                if !edges.contains_key(id.as_str()) {
                    return Err(ComposeError::Parse(format!(
                        "binding names undefined component id `{id}`"
                    )));
                }
            }
            let children = edges.get_mut(b.from.as_str()).unwrap();
            children.extend(b.to.iter().map(String::as_str));
        }
        Ok(edges)
    }

    /// The one component nothing binds to. Also rejects cycles.
    pub fn root(&self) -> Result<&str, ComposeError> {
        let edges = self.edges()?;
        if self.components.is_empty() {
            return Err(ComposeError::Parse("no components".into()));
        }
        // three-colour depth-first search over ids in config order
        let mut state: HashMap<&str, u8> = HashMap::new();
        for c in &self.components {
            let mut path = Vec::new();
            visit(&c.id, &edges, &mut state, &mut path)?;
        }
        let bound: HashSet<&str> = edges.values().flatten().copied().collect();
        let roots: Vec<&str> = self
            .components
            .iter()
            .map(|c| c.id.as_str())
            .filter(|id| !bound.contains(id))
            .collect();
        match roots.as_slice() {
            [root] => Ok(root),
            _ => Err(ComposeError::MultipleRoots(roots.iter().map(|s| s.to_string()).collect())),
        }
    }

    /// Ids ordered children before parents, starting from the root.
    pub fn build_order(&self) -> Result<Vec<&str>, ComposeError> {
        let root = self.root()?;
        let edges = self.edges()?;
        let mut order = Vec::new();
        let mut done = HashSet::new();
        post_order(root, &edges, &mut done, &mut order);
        Ok(order)
    }

    fn spec(&self, id: &str) -> &ComponentSpec {
        self.components.iter().find(|c| c.id == id).unwrap()
    }
}

fn visit<'a>(
    id: &'a str,
    edges: &HashMap<&'a str, Vec<&'a str>>,
    state: &mut HashMap<&'a str, u8>,
    path: &mut Vec<&'a str>,
) -> Result<(), ComposeError> {
    match state.get(id) {
        Some(2) => return Ok(()),
        Some(1) => {
            let start = path.iter().position(|p| *p == id).unwrap();
            let mut cycle: Vec<&str> = path[start..].to_vec();
            cycle.push(id);
            return Err(ComposeError::CycleDetected(cycle.join(" -> ")));
        }
        _ => {}
    }
    state.insert(id, 1);
    path.push(id);
    for child in &edges[id] {
        visit(child, edges, state, path)?;
    }
    path.pop();
    state.insert(id, 2);
    Ok(())
}

fn post_order<'a>(
    id: &'a str,
    edges: &HashMap<&'a str, Vec<&'a str>>,
    done: &mut HashSet<&'a str>,
    order: &mut Vec<&'a str>,
) {
    if !done.insert(id) {
        return;
    }
    for child in &edges[id] {
        post_order(child, edges, done, order);
    }
    order.push(id);
}

/// A built stack. Holds one count on the root and, when configured, one on
/// the service component; both are released on drop.
pub struct Stack {
    root: Option<ComponentRef>,
    service: Option<ComponentRef>,
    mode: Option<ServiceMode>,
}

impl Stack {
    pub fn root(&self) -> &ComponentRef {
        self.root.as_ref().expect("stack is live")
    }

    pub fn service(&self) -> Option<&ComponentRef> {
        self.service.as_ref()
    }

    pub fn mode(&self) -> Option<ServiceMode> {
        self.mode
    }

    /// The block device IO should be issued to: the service when there is
    /// one, else the root.
    pub fn block_device(&self) -> Result<Arc<dyn BlockDevice>, ComponentError> {
        match &self.service {
            Some(s) => s.block_device(),
            None => self.root().block_device(),
        }
    }

    pub fn kv_store(&self) -> Result<Arc<dyn KvStore>, ComponentError> {
        self.root().kv_store()
    }

    pub fn release(mut self) -> Result<(), ComponentError> {
        self.release_held()
    }

    fn release_held(&mut self) -> Result<(), ComponentError> {
        let root = self.root.take();
        let service = self.service.take();
        for r in [root, service].into_iter().flatten() {
            r.release()?;
        }
        Ok(())
    }
}

impl Drop for Stack {
    fn drop(&mut self) {
        let _ = self.release_held();
    }
}

/// Create, bind and start every component, children first.
///
/// With a `service` section the service component sits directly beneath a
/// root that is not itself a block device (a KV store), or on top of a
/// block-device root.
pub fn instantiate(config: &StackConfig, registry: &Registry) -> Result<Stack, ComposeError> {
    config.check_types(registry)?;
    let order = config.build_order()?;
    let root_id = *order.last().unwrap();
    let mut created: Vec<ComponentRef> = Vec::new();
    let result = build(config, registry, &order, root_id, &mut created);
    match result {
        Ok((root, service)) => {
            for r in created.into_iter().rev() {
                r.release()?;
            }
            Ok(Stack {
                root: Some(root),
                service,
                mode: config.service.as_ref().map(|s| s.mode),
            })
        }
        Err(e) => {
            for r in created.into_iter().rev() {
                let _ = r.release();
            }
            Err(e)
        }
    }
}

type Built = (ComponentRef, Option<ComponentRef>);

fn build(
    config: &StackConfig,
    registry: &Registry,
    order: &[&str],
    root_id: &str,
    created: &mut Vec<ComponentRef>,
) -> Result<Built, ComposeError> {
    let mut by_id: HashMap<&str, usize> = HashMap::new();
    for id in order {
        let spec = config.spec(id);
        let c = registry.create_by_type(&spec.type_name, &spec.config)?;
        by_id.insert(id, created.len());
        created.push(c);
    }
    let service_spec = config.service.as_ref();
    let mut service = None;
    for id in order {
        let component = created[by_id[id]].duplicate()?;
        let children: Vec<usize> = config
            .bindings
            .iter()
            .filter(|b| b.from == *id)
            .flat_map(|b| b.to.iter().map(|t| by_id[t.as_str()]))
            .collect();
        let beneath = *id == root_id && service_spec.is_some() && !component.supports(IBLOCK_DEVICE)?;
        let outcome = if beneath {
            let spec = service_spec.unwrap();
            if children.len() != 1 {
                Err(ComposeError::Component(ComponentError::IncompatibleDependency(format!(
                    "a service can only be placed under `{id}` when it binds exactly one device"
                ))))
            } else {
                let s = start_service(registry, spec, &created[children[0]])?;
                let bound = bind(&component, &s);
                service = Some(s);
                bound.map_err(Into::into)
            }
        } else {
            children
                .iter()
                .try_for_each(|&c| bind(&component, &created[c]))
                .map_err(Into::into)
        };
        let outcome = outcome.and_then(|_| component.start().map_err(Into::into));
        component.release()?;
        outcome?;
    }
    let root = created[by_id[root_id]].duplicate()?;
    if let (Some(spec), None) = (service_spec, &service) {
        match start_service(registry, spec, &root) {
            Ok(s) => service = Some(s),
            Err(e) => {
                root.release()?;
                return Err(e);
            }
        }
    }
    Ok((root, service))
}

fn start_service(
    registry: &Registry,
    spec: &ServiceSpec,
    over: &ComponentRef,
) -> Result<ComponentRef, ComposeError> {
    let config = serde_json::to_value(spec.service_config()).expect("service config serializes");
    let service = registry.create_by_type("service", &config)?;
    let started = bind(&service, over).and_then(|_| service.start());
    if let Err(e) = started {
        service.release()?;
        return Err(e.into());
    }
    Ok(service)
}
