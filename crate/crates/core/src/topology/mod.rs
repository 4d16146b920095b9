//! Multi-datacenter optical network: nodes, fiber links and per-link
//! frequency-slot occupancy.
//!
//! Each [`Link`] keeps its active [`SpectrumAllocation`]s and an occupancy
//! vector that is always the union of their slot ranges. Time only moves
//! forward through [`Network::advance`], which expires allocations and
//! admits background connections in timestamp order.

mod background;
mod occupancy;

use std::cmp::{Ordering, Reverse};
use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

pub use background::{ArrivalStream, BackgroundArrival, BackgroundTrafficModel};
pub use occupancy::{Occupancy, SlotBlock};

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LinkId(pub usize);

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OwnerId(pub u64);

impl fmt::Display for OwnerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficClass {
    Training,
    Background,
}

impl TrafficClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrafficClass::Training => "training",
            TrafficClass::Background => "background",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumAllocation {
    pub owner: OwnerId,
    pub block: SlotBlock,
    pub release_time: f64,
}

#[derive(Debug, Clone)]
pub struct Link {
    /// Endpoints. For per-direction spectrum this is `(from, to)`.
    pub endpoints: (NodeId, NodeId),
    pub length_km: f64,
    occupancy: Occupancy,
    allocations: Vec<SpectrumAllocation>,
}

impl Link {
    pub fn occupancy(&self) -> &Occupancy {
        &self.occupancy
    }

    pub fn allocations(&self) -> &[SpectrumAllocation] {
        &self.allocations
    }
}

/// Spectrum parameters supplied by the run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumConfig {
    pub fs_total: usize,
    pub slot_width_ghz: f64,
    /// One spectrum vector per fiber direction instead of one shared vector.
    pub per_direction: bool,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            fs_total: 80,
            slot_width_ghz: 12.5,
            per_direction: false,
        }
    }
}

/// On-disk topology description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub nodes: Vec<String>,
    pub links: Vec<LinkSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub length_km: f64,
}

pub const NSFNET_JSON: &str = include_str!("../../data/nsfnet.json");

/// One spectrum state change, as written to the replay log.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumEvent {
    pub time: f64,
    pub kind: SpectrumEventKind,
    pub owner: OwnerId,
    pub class: TrafficClass,
    pub block: SlotBlock,
    pub links: Vec<LinkId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumEventKind {
    Allocate,
    Release,
}

#[derive(Debug, Clone)]
struct OwnerRecord {
    links: Vec<LinkId>,
    block: SlotBlock,
    release_time: f64,
    class: TrafficClass,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct PendingRelease {
    time: f64,
    owner: OwnerId,
}

impl Eq for PendingRelease {}

impl PartialOrd for PendingRelease {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for PendingRelease {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.owner.cmp(&other.owner))
    }
}

#[derive(Debug, Clone)]
struct BackgroundProcess {
    stream: ArrivalStream,
    /// Shortest route per ordered node pair, indexed `src * n + dst`.
    routes: Vec<Vec<LinkId>>,
}

#[derive(Debug, Clone)]
pub struct Network {
    names: Vec<String>,
    index: HashMap<String, NodeId>,
    links: Vec<Link>,
    adjacency: Vec<Vec<(NodeId, LinkId)>>,
    fs_total: usize,
    slot_width_ghz: f64,
    per_direction: bool,
    clock: f64,
    owners: BTreeMap<OwnerId, OwnerRecord>,
    releases: BinaryHeap<Reverse<PendingRelease>>,
    next_owner: u64,
    background: Option<BackgroundProcess>,
    log: Option<Vec<SpectrumEvent>>,
}

/// Parses a JSON topology and builds a network with all slots free.
pub fn load_topology(source: &str, spectrum: SpectrumConfig) -> Result<Network> {
    let file: TopologyFile =
        serde_json::from_str(source).map_err(|e| Error::TopologyParse(e.to_string()))?;
    Network::from_file(&file, spectrum)
}

impl Network {
    /// The bundled 14-node, 21-link NSFNET topology.
    pub fn nsfnet(spectrum: SpectrumConfig) -> Result<Self> {
        load_topology(NSFNET_JSON, spectrum)
    }

    pub fn from_file(file: &TopologyFile, spectrum: SpectrumConfig) -> Result<Self> {
        if spectrum.fs_total < 1 {
            return Err(Error::invalid("topology.fs_total", "must be at least 1"));
        }
        if !(spectrum.slot_width_ghz > 0.0 && spectrum.slot_width_ghz.is_finite()) {
            return Err(Error::invalid("topology.slot_width_ghz", "must be positive"));
        }
        let mut index = HashMap::new();
        for (id, name) in file.nodes.iter().enumerate() {
            if index.insert(name.clone(), id).is_some() {
                return Err(Error::DuplicateNode(name.clone()));
            }
        }
        let n = file.nodes.len();
        let mut links = Vec::new();
        let mut adjacency = vec![Vec::new(); n];
        let mut seen = BTreeSet::new();
        for spec in &file.links {
            let a = *index
                .get(&spec.a)
                .ok_or_else(|| Error::UnknownNode(spec.a.clone()))?;
            let b = *index
                .get(&spec.b)
                .ok_or_else(|| Error::UnknownNode(spec.b.clone()))?;
            if !(spec.length_km > 0.0 && spec.length_km.is_finite()) {
                return Err(Error::NonPositiveLength {
                    a: spec.a.clone(),
                    b: spec.b.clone(),
                    length_km: spec.length_km,
                });
            }
            if a == b || !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::DuplicateLink {
                    a: spec.a.clone(),
                    b: spec.b.clone(),
                });
            }
            let mut push = |from: NodeId, to: NodeId| {
                let id = LinkId(links.len());
                links.push(Link {
                    endpoints: (from, to),
                    length_km: spec.length_km,
                    occupancy: Occupancy::new(spectrum.fs_total),
                    allocations: Vec::new(),
                });
                id
            };
            if spectrum.per_direction {
                let forward = push(a, b);
                let backward = push(b, a);
                adjacency[a].push((b, forward));
                adjacency[b].push((a, backward));
            } else {
                let id = push(a, b);
                adjacency[a].push((b, id));
                adjacency[b].push((a, id));
            }
        }
        for neighbours in &mut adjacency {
            neighbours.sort();
        }
        let net = Self {
            names: file.nodes.clone(),
            index,
            links,
            adjacency,
            fs_total: spectrum.fs_total,
            slot_width_ghz: spectrum.slot_width_ghz,
            per_direction: spectrum.per_direction,
            clock: 0.0,
            owners: BTreeMap::new(),
            releases: BinaryHeap::new(),
            next_owner: 0,
            background: None,
            log: None,
        };
        if !net.is_connected() {
            return Err(Error::Disconnected);
        }
        Ok(net)
    }

    fn is_connected(&self) -> bool {
        let n = self.names.len();
        if n == 0 {
            return false;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &(v, _) in &self.adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    /// Number of fibers in the topology, independent of per-direction mode.
    pub fn fiber_count(&self) -> usize {
        if self.per_direction {
            self.links.len() / 2
        } else {
            self.links.len()
        }
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id.0]
    }

    pub fn node_name(&self, id: NodeId) -> &str {
        &self.names[id]
    }

    pub fn node_names(&self) -> &[String] {
        &self.names
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.index.get(name).copied()
    }

    /// Outgoing `(neighbour, link)` pairs sorted by neighbour id.
    pub fn neighbours(&self, node: NodeId) -> &[(NodeId, LinkId)] {
        &self.adjacency[node]
    }

    pub fn fs_total(&self) -> usize {
        self.fs_total
    }

    pub fn slot_width_ghz(&self) -> f64 {
        self.slot_width_ghz
    }

    pub fn per_direction(&self) -> bool {
        self.per_direction
    }

    /// Time of the last state update.
    pub fn clock(&self) -> f64 {
        self.clock
    }

    /// Hands out a fresh allocation owner id.
    pub fn next_owner_id(&mut self) -> OwnerId {
        let id = OwnerId(self.next_owner);
        self.next_owner += 1;
        id
    }

    pub fn active_owners(&self) -> impl Iterator<Item = (OwnerId, TrafficClass)> + '_ {
        self.owners.iter().map(|(id, rec)| (*id, rec.class))
    }

    pub fn is_active(&self, owner: OwnerId) -> bool {
        self.owners.contains_key(&owner)
    }

    /// Installs a background process starting at the current clock.
    pub fn set_background(&mut self, model: BackgroundTrafficModel) -> Result<()> {
        model.validate(self.fs_total)?;
        let n = self.node_count();
        let mut routes = Vec::with_capacity(n * n);
        for src in 0..n {
            for dst in 0..n {
                if src == dst {
                    routes.push(Vec::new());
                } else {
                    let path = crate::rsa::k_shortest_paths(self, src, dst, 1)
                        .into_iter()
                        .next()
                        .ok_or(Error::Disconnected)?;
                    routes.push(path.links);
                }
            }
        }
        self.background = Some(BackgroundProcess {
            stream: ArrivalStream::new(model, n, self.clock),
            routes,
        });
        Ok(())
    }

    pub fn background_model(&self) -> Option<&BackgroundTrafficModel> {
        self.background.as_ref().map(|bg| bg.stream.model())
    }

    pub fn enable_event_log(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    /// Takes the spectrum events recorded since the last drain.
    pub fn drain_events(&mut self) -> Vec<SpectrumEvent> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Moves the clock to `now`, expiring allocations and admitting
    /// background arrivals in `(clock, now]` in timestamp order. Releases
    /// sort before arrivals at equal times. Returns the number of state
    /// changes (releases plus admitted arrivals); blocked background
    /// requests are dropped without counting.
    pub fn advance(&mut self, now: f64) -> usize {
        if now <= self.clock {
            return 0;
        }
        let mut changes = 0;
        loop {
            let next_release = self.peek_release();
            let next_arrival = self
                .background
                .as_ref()
                .map_or(f64::INFINITY, |bg| bg.stream.peek_time());
            if next_release.is_some_and(|t| t <= now && t <= next_arrival) {
                let Reverse(pending) = self.releases.pop().expect("peeked");
                self.clock = self.clock.max(pending.time);
                self.expire(pending.owner, pending.time);
                changes += 1;
            } else if next_arrival <= now {
                let bg = self.background.as_mut().expect("arrival implies background");
                let arrival = bg.stream.pop();
                self.clock = arrival.time;
                if self.admit_background(&arrival) {
                    changes += 1;
                }
            } else {
                break;
            }
        }
        self.clock = now;
        changes
    }

    /// Time of the earliest live pending release, dropping stale heap entries.
    fn peek_release(&mut self) -> Option<f64> {
        while let Some(Reverse(top)) = self.releases.peek() {
            match self.owners.get(&top.owner) {
                Some(rec) if rec.release_time == top.time => return Some(top.time),
                _ => {
                    self.releases.pop();
                }
            }
        }
        None
    }

    fn admit_background(&mut self, arrival: &BackgroundArrival) -> bool {
        if arrival.hold_s <= 0.0 {
            return false;
        }
        let n = self.node_count();
        let route = {
            let bg = self.background.as_ref().expect("background installed");
            bg.routes[arrival.src * n + arrival.dst].clone()
        };
        let aggregate = self.aggregate(&route);
        let Some(start) = first_fit(&aggregate, arrival.width) else {
            return false;
        };
        let owner = self.next_owner_id();
        let block = SlotBlock::with_width(start, arrival.width);
        self.commit(
            route,
            block,
            owner,
            arrival.time + arrival.hold_s,
            TrafficClass::Background,
        );
        true
    }

    /// Records `block` on every link of `path` for a training transfer.
    pub fn allocate_spectrum(
        &mut self,
        path: &[LinkId],
        block: SlotBlock,
        owner: OwnerId,
        release_time: f64,
    ) -> Result<()> {
        if path.is_empty() {
            return Err(Error::EmptyPath);
        }
        if block.start > block.end || block.end >= self.fs_total {
            return Err(Error::invalid(
                "block",
                format!("{block} outside 0..{}", self.fs_total),
            ));
        }
        if !(release_time > self.clock) {
            return Err(Error::invalid(
                "release_time",
                format!("{release_time} is not after the clock {}", self.clock),
            ));
        }
        if self.owners.contains_key(&owner) {
            return Err(Error::invalid("owner_id", format!("{owner} already holds spectrum")));
        }
        for &link in path {
            if !self.links[link.0].occupancy.is_block_free(block) {
                return Err(Error::SpectrumConflict { link, block });
            }
        }
        self.commit(path.to_vec(), block, owner, release_time, TrafficClass::Training);
        Ok(())
    }

    fn commit(
        &mut self,
        path: Vec<LinkId>,
        block: SlotBlock,
        owner: OwnerId,
        release_time: f64,
        class: TrafficClass,
    ) {
        for &link in &path {
            let link = &mut self.links[link.0];
            link.occupancy.set_block(block);
            link.allocations.push(SpectrumAllocation {
                owner,
                block,
                release_time,
            });
        }
        if let Some(log) = self.log.as_mut() {
            log.push(SpectrumEvent {
                time: self.clock,
                kind: SpectrumEventKind::Allocate,
                owner,
                class,
                block,
                links: path.clone(),
            });
        }
        self.releases.push(Reverse(PendingRelease {
            time: release_time,
            owner,
        }));
        self.owners.insert(
            owner,
            OwnerRecord {
                links: path,
                block,
                release_time,
                class,
            },
        );
    }

    /// Removes all allocations held by `owner` now.
    pub fn release_spectrum(&mut self, owner: OwnerId) -> Result<()> {
        if !self.owners.contains_key(&owner) {
            return Err(Error::UnknownOwner(owner));
        }
        let now = self.clock;
        self.expire(owner, now);
        Ok(())
    }

    fn expire(&mut self, owner: OwnerId, time: f64) {
        let Some(rec) = self.owners.remove(&owner) else {
            return;
        };
        for &link in &rec.links {
            let link = &mut self.links[link.0];
            link.occupancy.clear_block(rec.block);
            link.allocations.retain(|a| a.owner != owner);
        }
        if let Some(log) = self.log.as_mut() {
            log.push(SpectrumEvent {
                time,
                kind: SpectrumEventKind::Release,
                owner,
                class: rec.class,
                block: rec.block,
                links: rec.links,
            });
        }
    }

    /// Elementwise OR of link occupancy along `path`.
    pub fn path_aggregate_occupancy(&self, path: &[LinkId]) -> Result<Occupancy> {
        if path.is_empty() {
            return Err(Error::EmptyPath);
        }
        Ok(self.aggregate(path))
    }

    pub(crate) fn aggregate(&self, path: &[LinkId]) -> Occupancy {
        let mut acc = Occupancy::new(self.fs_total);
        for &link in path {
            acc.union_with(&self.links[link.0].occupancy);
        }
        acc
    }

    /// Rebuilds every occupancy vector from its allocations and checks for
    /// overlaps; returns a description of the first violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        for (i, link) in self.links.iter().enumerate() {
            let mut rebuilt = Occupancy::new(self.fs_total);
            for (k, a) in link.allocations.iter().enumerate() {
                if link.allocations[..k].iter().any(|b| b.block.overlaps(&a.block)) {
                    return Err(format!("link {i}: allocation {} overlaps", a.owner));
                }
                rebuilt.set_block(a.block);
            }
            if rebuilt != link.occupancy {
                return Err(format!(
                    "link {i}: occupancy {} differs from allocations {}",
                    link.occupancy, rebuilt
                ));
            }
        }
        Ok(())
    }

    /// Hash of the spectrum state, for checking that read-only code paths
    /// leave the network untouched.
    pub fn state_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.clock.to_bits().hash(&mut h);
        for link in &self.links {
            link.occupancy.hash(&mut h);
            for a in &link.allocations {
                a.owner.hash(&mut h);
                a.block.hash(&mut h);
                a.release_time.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Lowest start index of a free run of `width` slots.
pub fn first_fit(occupancy: &Occupancy, width: usize) -> Option<usize> {
    let mut run = 0;
    for j in 0..occupancy.len() {
        if occupancy.get(j) {
            run = 0;
        } else {
            run += 1;
            if run == width {
                return Some(j + 1 - width);
            }
        }
    }
    None
}
