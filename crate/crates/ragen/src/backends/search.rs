//! Search tool adapters: an offline fixture-corpus provider for deterministic
//! runs and a live HTTP provider, both exposed to the searcher as a `Tool`.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::searcher::{Tool, ToolError, ToolOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub title: String,
    pub url: String,
    pub snippet: String,
    #[serde(default = "default_relevance")]
    pub relevance: f64,
}

fn default_relevance() -> f64 {
    1.0
}

pub trait SearchProvider: Send + Sync {
    fn search(&self, query: &str, k: usize) -> Result<Vec<SearchResult>, ToolError>;
}

/// Serves results from a bundled corpus keyed by exact query string.
pub struct OfflineSearch {
    corpus: HashMap<String, Vec<SearchResult>>,
}

impl OfflineSearch {
    pub fn from_corpus(corpus: HashMap<String, Vec<SearchResult>>) -> Self {
        OfflineSearch { corpus }
    }

    pub fn load(path: &Path) -> Result<Self, ToolError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ToolError::Unavailable(format!("corpus unreadable: {e}")))?;
        let corpus = serde_json::from_str(&text)
            .map_err(|e| ToolError::Unavailable(format!("corpus malformed: {e}")))?;
        Ok(OfflineSearch { corpus })
    }
}

impl SearchProvider for OfflineSearch {
    fn search(&self, query: &str, k: usize) -> Result<Vec<SearchResult>, ToolError> {
        let mut results = self.corpus.get(query.trim()).cloned().unwrap_or_default();
        results.truncate(k);
        Ok(results)
    }
}

/// Calls a configured HTTP endpoint returning a JSON array of results.
pub struct LiveSearch {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl LiveSearch {
    pub fn new(endpoint: impl Into<String>) -> Self {
        LiveSearch {
            endpoint: endpoint.into(),
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl SearchProvider for LiveSearch {
    fn search(&self, query: &str, k: usize) -> Result<Vec<SearchResult>, ToolError> {
        let response = self
            .client
            .get(&self.endpoint)
            .query(&[("q", query), ("k", &k.to_string())])
            .send()
            .map_err(|e| ToolError::Unavailable(e.to_string()))?;
        if !response.status().is_success() {
            return Err(ToolError::Unavailable(format!(
                "search endpoint returned {}",
                response.status()
            )));
        }
        let mut results: Vec<SearchResult> = response
            .json()
            .map_err(|e| ToolError::Unavailable(format!("bad search body: {e}")))?;
        results.truncate(k);
        Ok(results)
    }
}

/// Wraps a provider as a searcher tool. The observation lists titles, urls
/// and snippets; the reported relevance is the best entry's score.
pub struct SearchTool {
    provider: Arc<dyn SearchProvider>,
    k: usize,
}

impl SearchTool {
    pub fn new(provider: Arc<dyn SearchProvider>, k: usize) -> Self {
        SearchTool {
            provider,
            k: k.max(1),
        }
    }
}

impl Tool for SearchTool {
    fn run(&self, input: &str) -> Result<ToolOutput, ToolError> {
        let results = self.provider.search(input, self.k)?;
        let relevance = results
            .iter()
            .map(|r| r.relevance)
            .fold(0.0_f64, f64::max);
        let text = results
            .iter()
            .map(|r| format!("{} — {}\n{}", r.title, r.url, r.snippet))
            .collect::<Vec<_>>()
            .join("\n\n");
        Ok(ToolOutput { text, relevance })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> HashMap<String, Vec<SearchResult>> {
        let mut m = HashMap::new();
        m.insert(
            "strcpy safety".to_string(),
            vec![
                SearchResult {
                    title: "Safe string copying in C".into(),
                    url: "https://example.org/strcpy".into(),
                    snippet: "Prefer strncpy or snprintf with explicit bounds.".into(),
                    relevance: 0.9,
                },
                SearchResult {
                    title: "CWE-787 write primer".into(),
                    url: "https://example.org/cwe787".into(),
                    snippet: "Out-of-bound writes arise from unchecked lengths.".into(),
                    relevance: 0.7,
                },
            ],
        );
        m
    }

    #[test]
    fn known_query_returns_fixture_entries() {
        let provider = OfflineSearch::from_corpus(corpus());
        let results = provider.search("strcpy safety", 5).unwrap();
        assert_eq!(results.len(), 2);
    }

    #[test]
    fn k_truncates_results() {
        let provider = OfflineSearch::from_corpus(corpus());
        let results = provider.search("strcpy safety", 1).unwrap();
        assert_eq!(results.len(), 1);
        assert_eq!(results[0].title, "Safe string copying in C");
    }

    #[test]
    fn unknown_query_is_empty_not_an_error() {
        let provider = OfflineSearch::from_corpus(corpus());
        assert!(provider.search("nothing here", 3).unwrap().is_empty());
    }

    #[test]
    fn tool_observation_contains_titles() {
        let tool = SearchTool::new(Arc::new(OfflineSearch::from_corpus(corpus())), 5);
        let output = tool.run("strcpy safety").unwrap();
        assert!(output.text.contains("Safe string copying in C"));
        assert!(output.text.contains("CWE-787 write primer"));
        assert!((output.relevance - 0.9).abs() < 1e-12);
    }

    #[test]
    fn empty_results_give_empty_observation() {
        let tool = SearchTool::new(Arc::new(OfflineSearch::from_corpus(corpus())), 5);
        let output = tool.run("unknown").unwrap();
        assert!(output.text.is_empty());
    }
}
