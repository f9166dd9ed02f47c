//! Context-aware recommendation by hybrid Q-learning.
//!
//! Situations are abstracted from raw sensor events ([`context`]), learned
//! with tabular Q-learning ([`qlearning`]), bootstrapped from stored cases
//! ([`casebase`]) and explored through collaborative-filtering advice
//! ([`collab`]). [`agent`] ties these together; [`sim`] provides the synthetic
//! world the agents are evaluated in, [`store`] the user/device/history/
//! preference database and [`experiment`] the benchmark harness.

pub mod agent;
pub mod casebase;
pub mod collab;
pub mod context;
pub mod experiment;
pub mod ids;
pub mod qlearning;
pub mod sim;
pub mod store;

pub use agent::{Agent, AgentConfig, AgentError, Environment, Keep, StepRecord, Variant};
pub use casebase::{Case, CaseBase, CaseBaseConfig, CaseProblem};
pub use collab::{CfScope, TransactionStore};
pub use context::{ContextModel, Gazetteer, RawEvent, SituationKey, TimeBucket, UserContext};
pub use ids::{ActionId, GroupId, UserId};
pub use qlearning::{ActionCatalog, AlphaSchedule, Branch, LearningParams, QTable};
