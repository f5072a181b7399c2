//! Parsing of path-selection replies such as `{Path 2} - rationale`.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selection {
    /// 1-based position in the rendered candidate list.
    Path {
        index: usize,
        rationale: String,
    },
    NoPath {
        rationale: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SelectionError {
    #[error("no path marker in selection output")]
    NoMarker,
    #[error("selected path {index} outside 1..={pool_size}")]
    OutOfRange { index: usize, pool_size: usize },
}

// Single or doubled braces: templates escape literal braces by doubling.
static MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\{\{?\s*(?:path\s+(\d+)|no\s+path)\s*\}\}?").expect("valid regex"));

fn rationale(rest: &str) -> String {
    rest.trim_start_matches(|c: char| c.is_whitespace() || c == '-' || c == ':')
        .trim_end()
        .to_string()
}

/// First marker wins; text after it is kept as the rationale.
pub fn parse_path_selection(raw: &str, pool_size: usize) -> Result<Selection, SelectionError> {
    assert!(pool_size >= 1, "pool_size must be at least 1");
    let caps = MARKER.captures(raw).ok_or(SelectionError::NoMarker)?;
    let rest = rationale(&raw[caps.get(0).expect("whole match").end()..]);
    match caps.get(1) {
        None => Ok(Selection::NoPath { rationale: rest }),
        Some(m) => {
            let index = m.as_str().parse::<usize>().unwrap_or(usize::MAX);
            if index == 0 || index > pool_size {
                return Err(SelectionError::OutOfRange { index, pool_size });
            }
            Ok(Selection::Path { index, rationale: rest })
        }
    }
}
