//! Local-first knowledge hub.
//!
//! A presenter teaches the hub by speaking (or typing) explanations; the
//! hub chunks, embeds and stores them. Visitors later wake the hub with a
//! wake phrase and ask questions, which are answered from the stored
//! knowledge through a retrieve → prompt → generate pipeline. Hubs can
//! share consented knowledge with each other by anti-entropy gossip.

pub mod backends;
pub mod binary;
pub mod chunking;
pub mod embedder;
pub mod engine;
pub mod network;
mod remote;
pub mod store;
pub mod survey;
#[cfg(test)]
mod testutil;
pub mod wire;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/knowledge.md")]
    mod knowledge {}
    #[doc = include_str!("../../../book/src/dialogue.md")]
    mod dialogue {}
    #[doc = include_str!("../../../book/src/surveys.md")]
    mod surveys {}
    #[doc = include_str!("../../../book/src/wire.md")]
    mod wire {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
}
