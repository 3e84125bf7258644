//! Back end for a single-lab information management system: instrument share
//! monitoring, prioritized harvesting into a tool/date archive, translation of
//! instrument files into a common XML format, relational storage and a query
//! service.

pub mod config;
pub mod datastore;
pub mod extractor;
pub mod format;
pub mod harvester;
pub mod messaging;
pub mod monitor;
pub mod pipeline;
pub mod service;
pub mod sim;

pub use format::{
    decode_data_document, decode_ops_message, encode_data_document, encode_ops_message,
    DataDocument, FormatError, OpsMessage, OpsRole, Timestamp, ToolInfo, ToolKind,
};
