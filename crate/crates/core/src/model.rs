//! Shared domain types: roles, agent ids, group configuration, debate
//! state and trajectories.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::backends::{BackendDescriptor, RetrievedPassage};

/// The four functional roles of a panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Reasoning,
    Knowledge,
    Safety,
    Judge,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Reasoning, Role::Knowledge, Role::Safety, Role::Judge];

    pub fn prefix(self) -> char {
        match self {
            Role::Reasoning => 'R',
            Role::Knowledge => 'K',
            Role::Safety => 'S',
            Role::Judge => 'J',
        }
    }

    pub fn from_prefix(c: char) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.prefix() == c)
    }

    /// Debaters take part in the flat exchange; the others run sequentially after it.
    pub fn is_debater(self) -> bool {
        matches!(self, Role::Reasoning | Role::Knowledge)
    }

    pub fn short_label(self) -> &'static str {
        match self {
            Role::Reasoning => "A_R",
            Role::Knowledge => "A_K",
            Role::Safety => "A_S",
            Role::Judge => "A_J",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Role::Reasoning => "reasoning",
            Role::Knowledge => "knowledge",
            Role::Safety => "safety",
            Role::Judge => "judge",
        };
        f.write_str(name)
    }
}

/// Agent identifier of the form `{role prefix}{1-based index}`, e.g. `R1`, `K2`.
///
/// Ordering follows role order (Reasoning, Knowledge, Safety, Judge) and
/// then the numeric index, so `R2 < R10`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgentId {
    pub role: Role,
    pub index: u32,
}

impl AgentId {
    pub fn new(role: Role, index: u32) -> Self {
        Self { role, index }
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.role.prefix(), self.index)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid agent id `{0}`")]
pub struct AgentIdParseError(pub String);

impl FromStr for AgentId {
    type Err = AgentIdParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.chars();
        let role = chars
            .next()
            .and_then(Role::from_prefix)
            .ok_or_else(|| AgentIdParseError(s.to_string()))?;
        let index: u32 = chars
            .as_str()
            .parse()
            .map_err(|_| AgentIdParseError(s.to_string()))?;
        if index == 0 {
            return Err(AgentIdParseError(s.to_string()));
        }
        Ok(AgentId { role, index })
    }
}

impl Serialize for AgentId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AgentId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum InteractionMode {
    #[default]
    Debate,
    MajorityVote,
}

/// Which decoding parameter a run sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum DecodingRegime {
    #[default]
    Base,
    Temp,
    TopP,
    Cand,
}

impl fmt::Display for DecodingRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DecodingRegime::Base => "base",
            DecodingRegime::Temp => "temp",
            DecodingRegime::TopP => "top_p",
            DecodingRegime::Cand => "cand",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub num_candidates: u32,
    pub seed: i64,
    pub regime_label: DecodingRegime,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 1.0,
            num_candidates: 1,
            seed: 0,
            regime_label: DecodingRegime::Base,
        }
    }
}

impl DecodingParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ConfigError::InvalidDecoding(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ConfigError::InvalidDecoding(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.num_candidates == 0 {
            return Err(ConfigError::InvalidDecoding(
                "num_candidates must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Short name used in report paths, e.g. `base`, `temp0.7`, `cand3`.
    pub fn cell_label(&self) -> String {
        match self.regime_label {
            DecodingRegime::Base => "base".to_string(),
            DecodingRegime::Temp => format!("temp{}", self.temperature),
            DecodingRegime::TopP => format!("top_p{}", self.top_p),
            DecodingRegime::Cand => format!("cand{}", self.num_candidates),
        }
    }
}

fn default_counts() -> BTreeMap<Role, i64> {
    BTreeMap::from([
        (Role::Reasoning, 3),
        (Role::Knowledge, 3),
        (Role::Safety, 2),
        (Role::Judge, 2),
    ])
}

fn default_max_rounds() -> u32 {
    3
}

fn default_retrieval_k() -> usize {
    5
}

/// Panel composition, protocol limits and backend bindings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupConfig {
    #[serde(default = "default_counts")]
    pub counts: BTreeMap<Role, i64>,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: u32,
    #[serde(default)]
    pub ablation: BTreeSet<Role>,
    #[serde(default)]
    pub interaction_mode: InteractionMode,
    #[serde(default)]
    pub decoding: DecodingParams,
    /// Agent id (e.g. `R1`) to backend. May be empty when backends are
    /// supplied at run time.
    #[serde(default)]
    pub backend_bindings: BTreeMap<String, BackendDescriptor>,
    /// Passages injected into knowledge-agent prompts.
    #[serde(default = "default_retrieval_k")]
    pub retrieval_k: usize,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self {
            counts: default_counts(),
            max_rounds: default_max_rounds(),
            ablation: BTreeSet::new(),
            interaction_mode: InteractionMode::Debate,
            decoding: DecodingParams::default(),
            backend_bindings: BTreeMap::new(),
            retrieval_k: default_retrieval_k(),
        }
    }
}

impl GroupConfig {
    pub fn with_counts(r: i64, k: i64, s: i64, j: i64) -> Self {
        Self {
            counts: BTreeMap::from([
                (Role::Reasoning, r),
                (Role::Knowledge, k),
                (Role::Safety, s),
                (Role::Judge, j),
            ]),
            ..Self::default()
        }
    }

    pub fn count(&self, role: Role) -> i64 {
        self.counts.get(&role).copied().unwrap_or(0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("role {role} has negative count {count}")]
    NegativeCount { role: Role, count: i64 },
    #[error("role {0} has zero agents but is not listed in the ablation set")]
    ZeroRoleWithoutAblation(Role),
    #[error("configuration enables no agents")]
    NoAgents,
    #[error("max_rounds must be at least 1")]
    ZeroMaxRounds,
    #[error("retrieval_k must be at least 1")]
    ZeroRetrievalK,
    #[error("invalid decoding parameters: {0}")]
    InvalidDecoding(String),
    #[error("backend binding for `{0}` does not name an enabled agent")]
    UnknownBinding(String),
    #[error("invalid backend for {agent}: {reason}")]
    InvalidBackend { agent: String, reason: String },
}

/// A configuration that passed [`validate_group_config`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedConfig {
    config: GroupConfig,
    agents: Vec<AgentId>,
    bindings: BTreeMap<AgentId, BackendDescriptor>,
}

impl ValidatedConfig {
    pub fn config(&self) -> &GroupConfig {
        &self.config
    }

    /// Enabled agents in protocol order.
    pub fn agents(&self) -> &[AgentId] {
        &self.agents
    }

    pub fn agents_with_role(&self, role: Role) -> impl Iterator<Item = AgentId> + '_ {
        self.agents.iter().copied().filter(move |a| a.role == role)
    }

    pub fn total_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn is_enabled(&self, role: Role) -> bool {
        self.agents.iter().any(|a| a.role == role)
    }

    pub fn effective_count(&self, role: Role) -> usize {
        self.agents_with_role(role).count()
    }

    pub fn bindings(&self) -> &BTreeMap<AgentId, BackendDescriptor> {
        &self.bindings
    }

    pub fn max_rounds(&self) -> u32 {
        self.config.max_rounds
    }

    pub fn mode(&self) -> InteractionMode {
        self.config.interaction_mode
    }

    pub fn decoding(&self) -> &DecodingParams {
        &self.config.decoding
    }

    /// Same panel with a different decoding setting.
    pub fn with_decoding(&self, decoding: DecodingParams) -> Result<Self, ConfigError> {
        let mut config = self.config.clone();
        config.decoding = decoding;
        validate_group_config(config)
    }
}

/// Checks role counts, limits and bindings, and assigns agent ids.
///
/// A role listed in `ablation` is disabled regardless of its count.
pub fn validate_group_config(cfg: GroupConfig) -> Result<ValidatedConfig, ConfigError> {
    for (&role, &count) in &cfg.counts {
        if count < 0 {
            return Err(ConfigError::NegativeCount { role, count });
        }
    }
    for role in Role::ALL {
        if cfg.count(role) == 0 && !cfg.ablation.contains(&role) {
            return Err(ConfigError::ZeroRoleWithoutAblation(role));
        }
    }
    if cfg.max_rounds == 0 {
        return Err(ConfigError::ZeroMaxRounds);
    }
    if cfg.retrieval_k == 0 {
        return Err(ConfigError::ZeroRetrievalK);
    }
    cfg.decoding.validate()?;

    let agents: Vec<AgentId> = Role::ALL
        .into_iter()
        .filter(|role| !cfg.ablation.contains(role))
        .flat_map(|role| (1..=cfg.count(role) as u32).map(move |i| AgentId::new(role, i)))
        .collect();
    if agents.is_empty() {
        return Err(ConfigError::NoAgents);
    }

    let mut bindings = BTreeMap::new();
    for (key, descriptor) in &cfg.backend_bindings {
        let id: AgentId = key
            .parse()
            .map_err(|_| ConfigError::UnknownBinding(key.clone()))?;
        if !agents.contains(&id) {
            // Bindings for ablated agents are tolerated so one file serves every ablation.
            if cfg.ablation.contains(&id.role) {
                continue;
            }
            return Err(ConfigError::UnknownBinding(key.clone()));
        }
        descriptor
            .validate()
            .map_err(|reason| ConfigError::InvalidBackend {
                agent: key.clone(),
                reason,
            })?;
        bindings.insert(id, descriptor.clone());
    }

    Ok(ValidatedConfig {
        config: cfg,
        agents,
        bindings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum SafetyFlag {
    #[default]
    None,
    Concern,
    Violation,
}

/// Default confidence when a backend omits one.
pub const DEFAULT_CONFIDENCE: f64 = 0.5;

/// One agent's output for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMessage {
    pub agent_id: AgentId,
    pub role: Role,
    pub round: u32,
    /// Option label or free text; empty only for refusals.
    pub answer: String,
    pub rationale: String,
    pub confidence: f64,
    pub citations: Vec<String>,
    pub safety_flag: SafetyFlag,
    pub refusal: bool,
}

impl AgentMessage {
    /// The answer as a vote, `None` for refusals.
    pub fn vote(&self) -> Option<&str> {
        if self.refusal || self.answer.is_empty() {
            None
        } else {
            Some(&self.answer)
        }
    }

    pub fn as_answer(&self) -> Answer {
        match self.vote() {
            Some(label) => Answer::Label(label.to_string()),
            None => Answer::Refusal,
        }
    }
}

/// A final decision: an option label (or free-text answer) or a refusal.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Label(String),
    Refusal,
}

impl Answer {
    pub fn label(&self) -> Option<&str> {
        match self {
            Answer::Label(l) => Some(l),
            Answer::Refusal => None,
        }
    }

    pub fn is_refusal(&self) -> bool {
        matches!(self, Answer::Refusal)
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Answer::Label(l) => f.write_str(l),
            Answer::Refusal => f.write_str("<refusal>"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TerminationReason {
    Converged,
    MaxRounds,
    SafetyHalt,
}

/// The context visible to agents at a given round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebateState {
    pub query: String,
    /// Current consensus candidate; empty before the first adjudication.
    pub proposal: Option<String>,
    pub history: Vec<AgentMessage>,
    pub round: u32,
    pub evidence: Vec<RetrievedPassage>,
    pub terminated: bool,
    pub termination_reason: Option<TerminationReason>,
}

impl DebateState {
    pub fn new(query: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            proposal: None,
            history: Vec::new(),
            round: 0,
            evidence: Vec::new(),
            terminated: false,
            termination_reason: None,
        }
    }

    pub fn messages_in_round(&self, round: u32) -> impl Iterator<Item = &AgentMessage> {
        self.history.iter().filter(move |m| m.round == round)
    }
}

/// Sort key for messages: round, then role order, then agent index.
pub fn message_order(m: &AgentMessage) -> (u32, AgentId) {
    (m.round, m.agent_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub calls: u64,
}

impl TokenUsage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    pub fn add(&mut self, prompt: u64, completion: u64) {
        self.prompt_tokens += prompt;
        self.completion_tokens += completion;
        self.calls += 1;
    }
}

/// Reward terms of a scored trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardComponents {
    pub r_acc: f64,
    pub r_knw: f64,
    pub r_safe: f64,
    pub r_cons: f64,
}

/// A state snapshot together with the joint action taken from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: DebateState,
    pub joint_action: Vec<AgentMessage>,
}

/// Full record of one debate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub item_ref: String,
    pub agents: Vec<AgentId>,
    pub state: DebateState,
    pub states_and_actions: Vec<Step>,
    pub final_answer: Option<Answer>,
    pub reward_components: Option<RewardComponents>,
    pub rounds_used: u32,
    pub token_usage: BTreeMap<AgentId, TokenUsage>,
    /// End-to-end seconds for the debate.
    pub wall_time: f64,
    /// Seconds spent inside backend calls.
    pub call_time: f64,
}

impl Trajectory {
    pub fn total_tokens(&self) -> u64 {
        self.token_usage.values().map(TokenUsage::total).sum()
    }

    pub fn total_calls(&self) -> u64 {
        self.token_usage.values().map(|u| u.calls).sum()
    }

    pub fn all_messages(&self) -> &[AgentMessage] {
        &self.state.history
    }

    pub fn termination_reason(&self) -> Option<TerminationReason> {
        self.state.termination_reason
    }

    pub fn to_json_line(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrajectoryError {
    #[error("query must not be empty")]
    EmptyQuery,
}

/// Starts an empty trajectory bound to the enabled agents of `cfg`.
pub fn new_trajectory(query: &str, cfg: &ValidatedConfig) -> Result<Trajectory, TrajectoryError> {
    if query.trim().is_empty() {
        return Err(TrajectoryError::EmptyQuery);
    }
    Ok(Trajectory {
        item_ref: String::new(),
        agents: cfg.agents().to_vec(),
        state: DebateState::new(query),
        states_and_actions: Vec::new(),
        final_answer: None,
        reward_components: None,
        rounds_used: 0,
        token_usage: cfg
            .agents()
            .iter()
            .map(|&a| (a, TokenUsage::default()))
            .collect(),
        wall_time: 0.0,
        call_time: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_the_ten_agent_panel() {
        let v = validate_group_config(GroupConfig::default()).unwrap();
        assert_eq!(v.total_agents(), 10);
        let ids: Vec<String> = v.agents().iter().map(|a| a.to_string()).collect();
        assert_eq!(
            ids,
            ["R1", "R2", "R3", "K1", "K2", "K3", "S1", "S2", "J1", "J2"]
        );
        assert_eq!(v.max_rounds(), 3);
    }

    #[test]
    fn reasoning_ablation_validates() {
        let mut cfg = GroupConfig::with_counts(0, 3, 2, 2);
        cfg.ablation.insert(Role::Reasoning);
        let v = validate_group_config(cfg).unwrap();
        assert_eq!(v.total_agents(), 7);
        assert!(!v.is_enabled(Role::Reasoning));
    }

    #[test]
    fn config_errors() {
        assert_eq!(
            validate_group_config(GroupConfig::with_counts(-1, 3, 2, 2)),
            Err(ConfigError::NegativeCount {
                role: Role::Reasoning,
                count: -1
            })
        );
        assert_eq!(
            validate_group_config(GroupConfig::with_counts(3, 0, 2, 2)),
            Err(ConfigError::ZeroRoleWithoutAblation(Role::Knowledge))
        );
        let mut none = GroupConfig::with_counts(0, 0, 0, 0);
        none.ablation = Role::ALL.into_iter().collect();
        assert_eq!(validate_group_config(none), Err(ConfigError::NoAgents));
        let mut rounds = GroupConfig::default();
        rounds.max_rounds = 0;
        assert_eq!(validate_group_config(rounds), Err(ConfigError::ZeroMaxRounds));
    }

    #[test]
    fn ablated_role_with_nonzero_count_is_disabled() {
        let mut cfg = GroupConfig::default();
        cfg.ablation.insert(Role::Judge);
        let v = validate_group_config(cfg).unwrap();
        assert_eq!(v.total_agents(), 8);
        assert_eq!(v.effective_count(Role::Judge), 0);
    }

    #[test]
    fn agent_id_round_trip_and_order() {
        let id: AgentId = "K12".parse().unwrap();
        assert_eq!(id, AgentId::new(Role::Knowledge, 12));
        assert_eq!(id.to_string(), "K12");
        assert!("X1".parse::<AgentId>().is_err());
        assert!("R0".parse::<AgentId>().is_err());
        assert!(AgentId::new(Role::Reasoning, 2) < AgentId::new(Role::Reasoning, 10));
        assert!(AgentId::new(Role::Reasoning, 10) < AgentId::new(Role::Knowledge, 1));
    }

    #[test]
    fn new_trajectory_starts_empty() {
        let v = validate_group_config(GroupConfig::default()).unwrap();
        let t = new_trajectory("chest pain vignette", &v).unwrap();
        assert_eq!(t.rounds_used, 0);
        assert_eq!(t.state.round, 0);
        assert!(t.state.history.is_empty());
        assert!(!t.state.terminated);
        assert_eq!(new_trajectory("", &v), Err(TrajectoryError::EmptyQuery));

        let lean = validate_group_config(GroupConfig::with_counts(2, 2, 1, 1)).unwrap();
        let t = new_trajectory("any query", &lean).unwrap();
        assert_eq!(t.agents.len(), 6);
        assert_eq!(t.token_usage.len(), 6);
    }

    #[test]
    fn config_json_uses_field_names() {
        let json = r#"{"counts":{"Reasoning":2,"Knowledge":2,"Safety":1,"Judge":1},"max_rounds":4}"#;
        let cfg: GroupConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.count(Role::Safety), 1);
        assert_eq!(cfg.max_rounds, 4);
        assert_eq!(cfg.retrieval_k, 5);
        let v = validate_group_config(cfg).unwrap();
        assert_eq!(v.total_agents(), 6);
    }
}
