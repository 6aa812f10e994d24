// SPDX-License-Identifier: Apache-2.0

//! Confidential hub-and-spoke optical proximity correction.
//!
//! The geometry and imaging core ([`layout`], [`litho`], [`opc`], [`tiler`])
//! is pure and deterministic. The runtime pieces ([`cluster`], [`transport`],
//! [`secure_store`]) move work between a primary and its workers and keep
//! design data encrypted at rest and in motion. [`bench`] runs the security
//! configuration ladder and normalizes overheads against the baseline.

pub mod bench;
pub mod cluster;
pub mod layout;
pub mod litho;
pub mod opc;
pub mod secure_store;
pub mod tiler;
pub mod transport;
