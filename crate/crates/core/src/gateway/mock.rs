use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, CompletionRequest, GatewayError, StageTag};

/// A routing rule. It matches when the stage agrees (if given), every
/// `contains` substring is present in the prompt and no `not_contains`
/// substring is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<StageTag>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub not_contains: Vec<String>,
    pub response: String,
}

impl MockRule {
    pub fn new(stage: Option<StageTag>, contains: &[&str], response: impl Into<String>) -> Self {
        MockRule {
            stage,
            contains: contains.iter().map(|s| s.to_string()).collect(),
            not_contains: Vec::new(),
            response: response.into(),
        }
    }

    fn matches(&self, req: &CompletionRequest) -> bool {
        self.stage.is_none_or(|s| s == req.stage_tag)
            && self.contains.iter().all(|c| req.prompt_text.contains(c.as_str()))
            && !self.not_contains.iter().any(|c| req.prompt_text.contains(c.as_str()))
    }
}

/// Ordered rules; the first match wins, otherwise `default` is returned.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub default: String,
}

impl MockScript {
    pub fn with_default(default: impl Into<String>) -> Self {
        MockScript {
            rules: Vec::new(),
            default: default.into(),
        }
    }

    pub fn rule(mut self, rule: MockRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn respond(&self, req: &CompletionRequest) -> &str {
        self.rules
            .iter()
            .find(|r| r.matches(req))
            .map(|r| r.response.as_str())
            .unwrap_or(&self.default)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, GatewayError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("mock script {}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&raw).map_err(|e| e.to_string())
        } else {
            serde_json::from_str(&raw).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| GatewayError::Config(format!("mock script {}: {e}", path.display())))
    }
}

/// Offline backend answering from a [`MockScript`]. Its id embeds a hash of
/// the script so cached responses never leak across scripts.
pub struct MockBackend {
    script: MockScript,
    id: String,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        let digest = Sha256::digest(serde_json::to_vec(&script).expect("script serializes"));
        let id = format!("mock-{}", &hex::encode(digest)[..16]);
        MockBackend { script, id }
    }
}

impl Backend for MockBackend {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        Ok(self.script.respond(req).to_owned())
    }
}
