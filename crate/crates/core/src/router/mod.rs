// SPDX-License-Identifier: Apache-2.0

//! Programmable router: turns a request-level generate call into a script of
//! engine sub-request calls according to the active strategy.

pub mod script;
pub mod service;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::engine::api::{ApiError, RequestId};
use crate::kvcache::radix::RadixTree;
use crate::kvcache::Rank;
use crate::toymodel::Token;
pub use script::{Action, Begin, Call, CallOutcome, CallRecord, Script, ScriptExec, ScriptKind};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum RouterError {
    #[error("no engines configured")]
    NoEngines,
    #[error("no engine with role {0}")]
    RoleMissing(&'static str),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("invalid strategy parameters: {0}")]
    InvalidParams(String),
    #[error("no engine owns the request's context")]
    NoOwner,
    #[error("script protocol error: {0}")]
    Protocol(String),
    #[error("engine error: {0}")]
    Engine(#[from] ApiError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Prefill,
    Decode,
    Mixed,
}

impl Role {
    fn name(self) -> &'static str {
        match self {
            Role::Prefill => "prefill",
            Role::Decode => "decode",
            Role::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineEntry {
    pub rank: Rank,
    #[serde(default = "mixed")]
    pub role: Role,
    /// Base URL of the engine's HTTP API in service mode.
    #[serde(default)]
    pub api: Option<String>,
}

fn mixed() -> Role {
    Role::Mixed
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryConfig {
    pub name: String,
    pub context: Vec<Token>,
    pub owners: Vec<Rank>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MigrationConfig {
    pub categories: Vec<CategoryConfig>,
    /// Migrate when the most loaded engine carries more than `threshold`
    /// times the demand of the least loaded one.
    pub threshold: f64,
    /// Sliding window of recent requests used to measure demand.
    pub window: usize,
    /// Requests needed in the window before any migration.
    pub min_window: usize,
}

impl Default for MigrationConfig {
    fn default() -> Self {
        Self {
            categories: Vec::new(),
            threshold: 2.0,
            window: 100,
            min_window: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum StrategySpec {
    DataParallel,
    PdDisagg,
    ContextPdDisagg,
    BalancedPd { ratio: f64 },
    ContextMigration(MigrationConfig),
}

impl StrategySpec {
    pub fn name(&self) -> &'static str {
        match self {
            StrategySpec::DataParallel => "data_parallel",
            StrategySpec::PdDisagg => "pd_disagg",
            StrategySpec::ContextPdDisagg => "context_pd_disagg",
            StrategySpec::BalancedPd { .. } => "balanced_pd",
            StrategySpec::ContextMigration(_) => "context_migration",
        }
    }

    /// Human label including parameters, e.g. `balanced_pd(r=0.2)`.
    pub fn label(&self) -> String {
        match self {
            StrategySpec::BalancedPd { ratio } => format!("balanced_pd(r={ratio})"),
            s => s.name().to_string(),
        }
    }

    /// Parses `name` or `name:params`. `balanced_pd:0.2` and
    /// `balanced_pd:ratio=0.2` are equivalent.
    pub fn parse(s: &str) -> Result<Self, RouterError> {
        let (name, params) = s.split_once(':').unwrap_or((s, ""));
        let spec = match name {
            "data_parallel" | "dp" => StrategySpec::DataParallel,
            "pd_disagg" => StrategySpec::PdDisagg,
            "context_pd_disagg" => StrategySpec::ContextPdDisagg,
            "balanced_pd" => {
                let v = params.strip_prefix("ratio=").unwrap_or(params);
                let ratio = if v.is_empty() {
                    0.0
                } else {
                    v.parse()
                        .map_err(|_| RouterError::InvalidParams(format!("ratio {v:?}")))?
                };
                StrategySpec::BalancedPd { ratio }
            }
            "context_migration" => StrategySpec::ContextMigration(MigrationConfig::default()),
            other => return Err(RouterError::UnknownStrategy(other.to_string())),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Parses the `{name, params}` JSON form, reporting unknown names.
    pub fn from_json(v: serde_json::Value) -> Result<Self, RouterError> {
        let name = v
            .get("name")
            .and_then(|n| n.as_str())
            .ok_or_else(|| RouterError::InvalidParams("missing \"name\"".into()))?
            .to_string();
        if !matches!(
            name.as_str(),
            "data_parallel" | "pd_disagg" | "context_pd_disagg" | "balanced_pd" | "context_migration"
        ) {
            return Err(RouterError::UnknownStrategy(name));
        }
        let spec: StrategySpec =
            serde_json::from_value(v).map_err(|e| RouterError::InvalidParams(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), RouterError> {
        match self {
            StrategySpec::BalancedPd { ratio } if !(0.0..1.0).contains(ratio) => {
                Err(RouterError::InvalidParams(format!("ratio {ratio} outside [0, 1)")))
            }
            StrategySpec::ContextMigration(m) if m.threshold.is_nan() || m.threshold < 1.0 => {
                Err(RouterError::InvalidParams("threshold must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Split point of balanced PD: the decode engine prefills `prompt[s..]`.
/// Clamped to `len - 1` so the decode engine always computes the position
/// it samples from.
pub fn balanced_split(len: usize, ratio: f64, match_len: usize) -> usize {
    let s = ((1.0 - ratio) * len as f64).floor() as usize;
    s.max(match_len).min(len.saturating_sub(1))
}

#[derive(Debug, Clone)]
struct MigrationState {
    config: MigrationConfig,
    owners: Vec<BTreeSet<Rank>>,
    rr: Vec<usize>,
    window: VecDeque<usize>,
    pending: bool,
    tree: RadixTree<BTreeSet<Rank>>,
}

impl MigrationState {
    fn new(config: MigrationConfig) -> Self {
        let owners: Vec<BTreeSet<Rank>> = config
            .categories
            .iter()
            .map(|c| c.owners.iter().copied().collect())
            .collect();
        let mut tree = RadixTree::new();
        for (c, o) in config.categories.iter().zip(&owners) {
            record_owner(&mut tree, &c.context, o);
        }
        Self {
            rr: vec![0; owners.len()],
            owners,
            config,
            window: VecDeque::new(),
            pending: false,
            tree,
        }
    }

    fn category_of(&self, prompt: &[Token]) -> Option<usize> {
        self.config
            .categories
            .iter()
            .enumerate()
            .filter(|(_, c)| !c.context.is_empty() && prompt.starts_with(&c.context))
            .max_by_key(|(_, c)| c.context.len())
            .map(|(i, _)| i)
    }

    fn demand(&self) -> Vec<usize> {
        let mut d = vec![0; self.owners.len()];
        for &c in &self.window {
            d[c] += 1;
        }
        d
    }
}

/// Adds `owners` to every node on the path of `tokens`.
fn record_owner(tree: &mut RadixTree<BTreeSet<Rank>>, tokens: &[Token], owners: &BTreeSet<Rank>) {
    if tokens.is_empty() {
        return;
    }
    tree.insert(tokens, owners.clone());
    let (_, path) = tree.path(tokens);
    for id in path {
        if let Some(v) = tree.value_mut(id) {
            v.extend(owners.iter().copied());
        }
    }
}

/// Longest-match owners of `tokens` in an owner tree.
fn owners_of(tree: &RadixTree<BTreeSet<Rank>>, tokens: &[Token]) -> (usize, BTreeSet<Rank>) {
    let m = tree.peek(tokens);
    let owners = m
        .node
        .and_then(|n| tree.value(n).cloned())
        .unwrap_or_default();
    (m.len, owners)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryView {
    pub name: String,
    pub owners: Vec<Rank>,
    pub demand: usize,
}

/// Snapshot served by `GET /admin/cluster`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterView {
    pub engines: Vec<EngineEntry>,
    pub strategy: StrategySpec,
    pub round_robin: usize,
    /// Requests dispatched to each engine and not yet finished.
    pub outstanding: BTreeMap<Rank, usize>,
    pub categories: Vec<CategoryView>,
    pub migrations: usize,
    pub routed: u64,
}

const DECODE_TREE_LIMIT: usize = 50_000;
/// Shortest shared prefix that steers a request to a decode engine.
const MIN_AFFINITY_TOKENS: usize = 16;

#[derive(Debug, Clone)]
pub struct Router {
    engines: Vec<EngineEntry>,
    strategy: StrategySpec,
    rr: usize,
    role_rr: BTreeMap<Role, usize>,
    next_request: RequestId,
    migration: Option<MigrationState>,
    decode_tree: RadixTree<BTreeSet<Rank>>,
    outstanding: BTreeMap<Rank, usize>,
    migrations: usize,
    routed: u64,
}

impl Router {
    pub fn new(engines: Vec<EngineEntry>, strategy: StrategySpec) -> Result<Self, RouterError> {
        if engines.is_empty() {
            return Err(RouterError::NoEngines);
        }
        let mut r = Self {
            outstanding: engines.iter().map(|e| (e.rank, 0)).collect(),
            engines,
            strategy: StrategySpec::DataParallel,
            rr: 0,
            role_rr: BTreeMap::new(),
            next_request: 1,
            migration: None,
            decode_tree: RadixTree::new(),
            migrations: 0,
            routed: 0,
        };
        r.set_strategy(strategy)?;
        Ok(r)
    }

    pub fn engines(&self) -> &[EngineEntry] {
        &self.engines
    }

    pub fn strategy(&self) -> &StrategySpec {
        &self.strategy
    }

    pub fn migrations(&self) -> usize {
        self.migrations
    }

    /// Swaps the strategy for subsequent requests. Scripts already handed out
    /// are values and finish unchanged.
    pub fn set_strategy(&mut self, spec: StrategySpec) -> Result<(), RouterError> {
        spec.validate()?;
        match &spec {
            StrategySpec::PdDisagg | StrategySpec::ContextPdDisagg | StrategySpec::BalancedPd { .. } => {
                self.candidates(Role::Prefill)?;
                self.candidates(Role::Decode)?;
            }
            StrategySpec::ContextMigration(m) => {
                for c in &m.categories {
                    if let Some(bad) = c.owners.iter().find(|o| !self.engines.iter().any(|e| e.rank == **o)) {
                        return Err(RouterError::InvalidParams(format!(
                            "category {} owner {bad} is not an engine",
                            c.name
                        )));
                    }
                }
                self.migration = Some(MigrationState::new(m.clone()));
            }
            StrategySpec::DataParallel => {}
        }
        self.strategy = spec;
        Ok(())
    }

    fn candidates(&self, role: Role) -> Result<Vec<Rank>, RouterError> {
        let exact: Vec<Rank> = self.engines.iter().filter(|e| e.role == role).map(|e| e.rank).collect();
        if !exact.is_empty() {
            return Ok(exact);
        }
        let mixed: Vec<Rank> = self
            .engines
            .iter()
            .filter(|e| e.role == Role::Mixed)
            .map(|e| e.rank)
            .collect();
        if mixed.is_empty() {
            Err(RouterError::RoleMissing(role.name()))
        } else {
            Ok(mixed)
        }
    }

    fn pick(&mut self, role: Role) -> Result<Rank, RouterError> {
        let c = self.candidates(role)?;
        let i = self.role_rr.entry(role).or_insert(0);
        let r = c[*i % c.len()];
        *i = (*i + 1) % c.len();
        Ok(r)
    }

    fn round_robin(&mut self) -> Rank {
        let r = self.engines[self.rr].rank;
        self.rr = (self.rr + 1) % self.engines.len();
        r
    }

    fn fresh_id(&mut self, given: Option<RequestId>) -> RequestId {
        given.unwrap_or_else(|| {
            let id = self.next_request;
            self.next_request += 1;
            id
        })
    }

    fn pd_calls(p: Rank, d: Rank, len: usize, split: usize, max_tokens: usize) -> Vec<Call> {
        if split == 0 {
            return vec![Call::StartGenerate {
                engine: d,
                begin: Begin::At(0),
                max_tokens,
            }];
        }
        // The whole-prompt-but-last split is written as end=-1.
        let end = if split + 1 == len { -1 } else { split as i64 };
        vec![
            Call::PrepRecv {
                engine: d,
                end,
                context_only: false,
            },
            Call::RemoteSend {
                engine: p,
                recv: d,
                begin: Begin::MatchOf(0),
                end,
                addr_of: 0,
            },
            Call::StartGenerate {
                engine: d,
                begin: Begin::At(split as i64),
                max_tokens,
            },
        ]
    }

    /// Builds the script for one generate request.
    pub fn route(
        &mut self,
        prompt: Vec<Token>,
        max_tokens: usize,
        request_id: Option<RequestId>,
    ) -> Result<Script, RouterError> {
        if prompt.is_empty() {
            return Err(RouterError::Protocol("empty prompt".into()));
        }
        let id = self.fresh_id(request_id);
        let len = prompt.len();
        let calls = match self.strategy.clone() {
            StrategySpec::DataParallel => vec![Call::StartGenerate {
                engine: self.round_robin(),
                begin: Begin::At(0),
                max_tokens,
            }],
            StrategySpec::PdDisagg => {
                let (p, d) = (self.pick(Role::Prefill)?, self.pick(Role::Decode)?);
                Self::pd_calls(p, d, len, len - 1, max_tokens)
            }
            StrategySpec::ContextPdDisagg => {
                let p = self.pick(Role::Prefill)?;
                let ds = self.candidates(Role::Decode)?;
                let (m, owners) = owners_of(&self.decode_tree, &prompt);
                let tied: Vec<Rank> = ds.iter().copied().filter(|d| owners.contains(d)).collect();
                let d = if m >= MIN_AFFINITY_TOKENS && !tied.is_empty() {
                    let i = self.role_rr.entry(Role::Decode).or_insert(0);
                    let d = tied[*i % tied.len()];
                    *i = (*i + 1) % ds.len();
                    d
                } else {
                    self.pick(Role::Decode)?
                };
                if self.decode_tree.len() > DECODE_TREE_LIMIT {
                    self.decode_tree = RadixTree::new();
                }
                record_owner(&mut self.decode_tree, &prompt, &BTreeSet::from([d]));
                Self::pd_calls(p, d, len, len - 1, max_tokens)
            }
            StrategySpec::BalancedPd { ratio } => {
                let (p, d) = (self.pick(Role::Prefill)?, self.pick(Role::Decode)?);
                Self::pd_calls(p, d, len, balanced_split(len, ratio, 0), max_tokens)
            }
            StrategySpec::ContextMigration(_) => {
                let engine = match self.migration_target(&prompt) {
                    Ok(r) => r,
                    Err(RouterError::NoOwner) => self.round_robin(),
                    Err(e) => return Err(e),
                };
                vec![Call::StartGenerate {
                    engine,
                    begin: Begin::At(0),
                    max_tokens,
                }]
            }
        };
        let script = Script {
            request_id: id,
            strategy: self.strategy.label(),
            kind: ScriptKind::Generate,
            prompt,
            calls,
        };
        if let Some(g) = script.generator() {
            *self.outstanding.entry(g).or_insert(0) += 1;
        }
        self.routed += 1;
        Ok(script)
    }

    fn migration_target(&mut self, prompt: &[Token]) -> Result<Rank, RouterError> {
        let st = self.migration.as_mut().ok_or(RouterError::NoOwner)?;
        let c = st.category_of(prompt).ok_or(RouterError::NoOwner)?;
        st.window.push_back(c);
        while st.window.len() > st.config.window {
            st.window.pop_front();
        }
        let (m, owners) = owners_of(&st.tree, prompt);
        let owners: Vec<Rank> = if m >= st.config.categories[c].context.len() && !owners.is_empty() {
            owners.into_iter().collect()
        } else {
            st.owners[c].iter().copied().collect()
        };
        if owners.is_empty() {
            return Err(RouterError::NoOwner);
        }
        let i = &mut st.rr[c];
        let r = owners[*i % owners.len()];
        *i = (*i + 1) % owners.len();
        Ok(r)
    }

    /// Scripts that compute and pin every category context on its initial
    /// owners.
    pub fn warmup_scripts(&mut self) -> Vec<Script> {
        let Some(st) = &self.migration else { return Vec::new() };
        let mut out = Vec::new();
        let cats: Vec<(usize, CategoryConfig)> = st.config.categories.iter().cloned().enumerate().collect();
        for (i, c) in cats {
            for &o in &c.owners {
                let id = self.fresh_id(None);
                out.push(Script {
                    request_id: id,
                    strategy: "warmup".into(),
                    kind: ScriptKind::Warmup { category: i },
                    prompt: c.context.clone(),
                    calls: vec![
                        Call::StartGenerate {
                            engine: o,
                            begin: Begin::At(0),
                            max_tokens: 1,
                        },
                        Call::Pin {
                            engine: o,
                            len: c.context.len(),
                        },
                    ],
                });
            }
        }
        out
    }

    /// Per-engine demand: each category's window count split evenly across
    /// its owners.
    pub fn engine_loads(&self) -> BTreeMap<Rank, f64> {
        let mut loads: BTreeMap<Rank, f64> = self.engines.iter().map(|e| (e.rank, 0.0)).collect();
        if let Some(st) = &self.migration {
            for (c, d) in st.demand().into_iter().enumerate() {
                let n = st.owners[c].len();
                for o in &st.owners[c] {
                    *loads.entry(*o).or_insert(0.0) += d as f64 / n as f64;
                }
            }
        }
        loads
    }

    /// Emits a migration script when category demand is imbalanced beyond
    /// the threshold. At most one migration is in flight.
    pub fn maybe_migrate(&mut self) -> Option<Script> {
        let st = self.migration.as_ref()?;
        if st.pending || st.window.len() < st.config.min_window {
            return None;
        }
        let loads = self.engine_loads();
        let (&hot, &hi) = loads.iter().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0)))?;
        let (&cold, &lo) = loads.iter().min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(b.0)))?;
        if hot == cold || hi <= st.config.threshold * lo {
            return None;
        }
        let demand = st.demand();
        let category = (0..st.owners.len())
            .filter(|&c| st.owners[c].contains(&hot) && !st.owners[c].contains(&cold) && demand[c] > 0)
            .max_by(|&a, &b| {
                let fa = demand[a] as f64 / st.owners[a].len() as f64;
                let fb = demand[b] as f64 / st.owners[b].len() as f64;
                fa.total_cmp(&fb).then(b.cmp(&a))
            })?;
        let context = st.config.categories[category].context.clone();
        let len = context.len();
        self.migration.as_mut().expect("checked").pending = true;
        let id = self.fresh_id(None);
        Some(Script {
            request_id: id,
            strategy: "context_migration".into(),
            kind: ScriptKind::Migration { category, target: cold },
            prompt: context,
            calls: vec![
                Call::PrepRecv {
                    engine: cold,
                    end: len as i64,
                    context_only: true,
                },
                Call::RemoteSend {
                    engine: hot,
                    recv: cold,
                    begin: Begin::MatchOf(0),
                    end: len as i64,
                    addr_of: 0,
                },
                Call::Pin { engine: cold, len },
            ],
        })
    }

    /// Bookkeeping once a script has run to the end (or failed).
    pub fn on_script_done(&mut self, script: &Script, ok: bool) {
        match script.kind {
            ScriptKind::Migration { category, target } => {
                if let Some(st) = self.migration.as_mut() {
                    st.pending = false;
                    if ok {
                        st.owners[category].insert(target);
                        let ctx = st.config.categories[category].context.clone();
                        record_owner(&mut st.tree, &ctx, &BTreeSet::from([target]));
                        self.migrations += 1;
                    }
                }
            }
            ScriptKind::Generate => {
                if let Some(g) = script.generator() {
                    if let Some(n) = self.outstanding.get_mut(&g) {
                        *n = n.saturating_sub(1);
                    }
                }
            }
            ScriptKind::Warmup { .. } => {}
        }
    }

    pub fn view(&self) -> ClusterView {
        let categories = self
            .migration
            .as_ref()
            .map(|st| {
                let d = st.demand();
                st.config
                    .categories
                    .iter()
                    .enumerate()
                    .map(|(i, c)| CategoryView {
                        name: c.name.clone(),
                        owners: st.owners[i].iter().copied().collect(),
                        demand: d[i],
                    })
                    .collect()
            })
            .unwrap_or_default();
        ClusterView {
            engines: self.engines.clone(),
            strategy: self.strategy.clone(),
            round_robin: self.rr,
            outstanding: self.outstanding.clone(),
            categories,
            migrations: self.migrations,
            routed: self.routed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engines(roles: &[Role]) -> Vec<EngineEntry> {
        roles
            .iter()
            .enumerate()
            .map(|(i, &role)| EngineEntry {
                rank: i as Rank,
                role,
                api: None,
            })
            .collect()
    }

    #[test]
    fn data_parallel_round_robin() {
        let mut r = Router::new(engines(&[Role::Mixed; 3]), StrategySpec::DataParallel).unwrap();
        let ranks: Vec<Rank> = (0..4)
            .map(|_| r.route(vec![1, 2], 4, None).unwrap().generator().unwrap())
            .collect();
        assert_eq!(ranks, vec![0, 1, 2, 0]);
        let s = r.route(vec![1], 1, None).unwrap();
        assert_eq!(s.calls.len(), 1);
        let mut one = Router::new(engines(&[Role::Mixed]), StrategySpec::DataParallel).unwrap();
        assert!((0..3).all(|_| one.route(vec![3], 1, None).unwrap().generator() == Some(0)));
        assert_eq!(Router::new(vec![], StrategySpec::DataParallel).unwrap_err(), RouterError::NoEngines);
    }

    #[test]
    fn pd_script_shape() {
        let mut r = Router::new(
            engines(&[Role::Prefill, Role::Decode, Role::Decode]),
            StrategySpec::PdDisagg,
        )
        .unwrap();
        let s = r.route((0..100).collect(), 4, None).unwrap();
        assert_eq!(
            s.calls,
            vec![
                Call::PrepRecv { engine: 1, end: -1, context_only: false },
                Call::RemoteSend { engine: 0, recv: 1, begin: Begin::MatchOf(0), end: -1, addr_of: 0 },
                Call::StartGenerate { engine: 1, begin: Begin::At(99), max_tokens: 4 },
            ]
        );
        assert_eq!(r.route((0..100).collect(), 4, None).unwrap().generator(), Some(2));
        let s = r.route(vec![5], 4, None).unwrap();
        assert_eq!(s.calls, vec![Call::StartGenerate { engine: 1, begin: Begin::At(0), max_tokens: 4 }]);
        assert_eq!(
            Router::new(engines(&[Role::Prefill]), StrategySpec::PdDisagg).unwrap_err(),
            RouterError::RoleMissing("decode")
        );
    }

    #[test]
    fn balanced_split_arithmetic() {
        assert_eq!(balanced_split(1000, 0.2, 0), 800);
        assert_eq!(balanced_split(10, 0.3, 0), 7);
        assert_eq!(balanced_split(10, 0.3, 8), 8);
        assert_eq!(balanced_split(100, 0.0, 0), 99);
        let mut pd = Router::new(engines(&[Role::Prefill, Role::Decode]), StrategySpec::PdDisagg).unwrap();
        let mut b0 = Router::new(
            engines(&[Role::Prefill, Role::Decode]),
            StrategySpec::BalancedPd { ratio: 0.0 },
        )
        .unwrap();
        let p: Vec<Token> = (0..50).collect();
        assert_eq!(pd.route(p.clone(), 3, None).unwrap().calls, b0.route(p, 3, None).unwrap().calls);
    }

    #[test]
    fn strategy_parsing_and_swap() {
        assert_eq!(StrategySpec::parse("balanced_pd:0.2").unwrap(), StrategySpec::BalancedPd { ratio: 0.2 });
        assert_eq!(
            StrategySpec::parse("balanced_pd:ratio=0.1").unwrap(),
            StrategySpec::BalancedPd { ratio: 0.1 }
        );
        assert!(matches!(StrategySpec::parse("magic"), Err(RouterError::UnknownStrategy(_))));
        assert!(StrategySpec::parse("balanced_pd:1.5").is_err());
        let v = serde_json::json!({"name": "balanced_pd", "params": {"ratio": 0.2}});
        assert_eq!(StrategySpec::from_json(v).unwrap(), StrategySpec::BalancedPd { ratio: 0.2 });
        let v = serde_json::json!({"name": "nope"});
        assert!(matches!(StrategySpec::from_json(v), Err(RouterError::UnknownStrategy(_))));
        let v = serde_json::json!({"name": "data_parallel"});
        assert_eq!(StrategySpec::from_json(v).unwrap(), StrategySpec::DataParallel);
    }

    fn migration_router(threshold: f64) -> (Router, Vec<Token>, Vec<Token>) {
        let a: Vec<Token> = (0..64).map(|i| (i * 3 + 1) % 256).collect();
        let b: Vec<Token> = (0..64).map(|i| (i * 5 + 2) % 256).collect();
        let cfg = MigrationConfig {
            categories: vec![
                CategoryConfig { name: "science".into(), context: a.clone(), owners: vec![0] },
                CategoryConfig { name: "history".into(), context: b.clone(), owners: vec![1] },
            ],
            threshold,
            window: 100,
            min_window: 10,
        };
        let r = Router::new(engines(&[Role::Mixed, Role::Mixed]), StrategySpec::ContextMigration(cfg)).unwrap();
        (r, a, b)
    }

    #[test]
    fn imbalanced_traffic_migrates_once() {
        let (mut r, a, b) = migration_router(2.0);
        let mut scripts = Vec::new();
        for i in 0..100 {
            let mut p = if i % 10 == 9 { b.clone() } else { a.clone() };
            p.push(i as Token);
            let s = r.route(p, 1, None).unwrap();
            if let Some(m) = r.maybe_migrate() {
                r.on_script_done(&m, true);
                scripts.push(m);
            }
            r.on_script_done(&s, true);
        }
        assert_eq!(scripts.len(), 1);
        assert_eq!(scripts[0].kind, ScriptKind::Migration { category: 0, target: 1 });
        assert_eq!(scripts[0].calls[0], Call::PrepRecv { engine: 1, end: 64, context_only: true });
        // Science traffic now spreads over both owners.
        let mut p = a.clone();
        p.push(7);
        let g: BTreeSet<Rank> = (0..4).map(|_| r.route(p.clone(), 1, None).unwrap().generator().unwrap()).collect();
        assert_eq!(g, BTreeSet::from([0, 1]));
    }

    #[test]
    fn balanced_traffic_never_migrates() {
        let (mut r, a, b) = migration_router(2.0);
        for i in 0..200 {
            let p = if i % 2 == 0 { a.clone() } else { b.clone() };
            r.route(p, 1, None).unwrap();
            assert!(r.maybe_migrate().is_none());
        }
        // Unknown context falls back to round robin.
        assert!(r.route(vec![9, 9, 9], 1, None).is_ok());
    }
}
