//! Confidential retrieval engine with a software-emulated enclave.
//!
//! Plaintext from private records and queries is handled only inside
//! [`enclave::Enclave::exec`]; everything persisted or returned is ciphertext,
//! record identifiers, or digests.

pub mod audit;
pub mod canary;
pub mod crypto;
pub mod embedder;
pub mod enclave;
pub mod governance;
pub mod privacy;
pub mod rag;
pub mod registry;
pub mod store;

#[cfg(any(test, feature = "test-support"))]
pub mod oracle;
