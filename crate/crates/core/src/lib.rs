// SPDX-License-Identifier: Apache-2.0

pub mod bench;
pub mod engine;
pub mod kvcache;
pub mod router;
pub mod toymodel;
pub mod transport;
