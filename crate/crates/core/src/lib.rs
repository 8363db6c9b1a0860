//! Knowledge-guided tree search over algorithmic plans for code generation.
//!
//! A search grows a tree of natural-language steps. Each node is scored by
//! its mean reward, a UCB exploration bonus and its similarity to a
//! knowledge base of verified solution prefixes. Leaves are completed into
//! full plans, turned into Python, and checked in a sandbox.

pub mod bench;
pub mod embedding;
pub mod gateway;
pub mod kb;
pub mod par;
pub mod problem;
pub mod sandbox;
pub mod search;
pub mod sync;
pub mod tokens;

#[cfg(test)]
mod testutil;

pub use embedding::{cosine, Embedder, EmbeddingError, EmbeddingVector, HashedTrigramEmbedder, RemoteEmbedder};
pub use gateway::{ChatBackend, Gateway, GatewayError, MockRecord, ScriptedMock};
pub use kb::{build_kb, CorpusItem, KbEntry, KbError, KnowledgeBase};
pub use problem::{Problem, Step, TestCase};
pub use sandbox::{CodeRunner, PythonSandbox, SandboxLimits, SandboxReport};
pub use tokens::{CallKind, TokenLedger, TokenTotals, TokenUsage};
pub use search::{run_search, SearchConfig, SearchDeps, SearchError, SearchResult, SearchTree};
pub use bench::{run_bench, BenchReport, Method};
