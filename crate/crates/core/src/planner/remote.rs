//! Chat-completion client used by the remote planner and remote judge.
//!
//! Wire shape: `POST {endpoint}` with `{"model", "messages": [{"role",
//! "content"}], "temperature"?, "seed"?}`; the reply's
//! `choices[0].message.content` must hold one JSON object.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::protocol::ProtocolDraft;
use crate::verifier::{JudgeError, JudgeInput, Layer, ScientificJudge, VerificationReport, Violation, ViolationKind};

use super::prompt::{render_prompt, PromptTemplate};
use super::{Planner, PlannerContext, PlannerError, SymbolicAction};

const POLL: Duration = Duration::from_millis(25);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token, if any.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
}

fn default_key_env() -> String {
    "DVR_API_KEY".to_string()
}

fn default_timeout() -> f64 {
    60.0
}

impl RemoteConfig {
    pub fn new(endpoint: &str, model: &str) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key_env: default_key_env(),
            temperature: None,
            seed: None,
            timeout_s: default_timeout(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Message {
    role: String,
    content: String,
}

fn message(role: &str, content: &str) -> Message {
    Message { role: role.to_string(), content: content.to_string() }
}

/// One blocking chat call on a helper thread, abandoned when `cancel` is set.
fn chat(config: &RemoteConfig, messages: &[Message], cancel: &AtomicBool) -> Result<String, PlannerError> {
    let mut body = json!({"model": config.model, "messages": messages});
    if let Some(t) = config.temperature {
        body["temperature"] = json!(t);
    }
    if let Some(s) = config.seed {
        body["seed"] = json!(s);
    }
    let token = std::env::var(&config.api_key_env).ok();
    let endpoint = config.endpoint.clone();
    let timeout = Duration::from_secs_f64(config.timeout_s.max(0.001));

    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        let mut req = agent.post(&endpoint);
        if let Some(t) = token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let result = req
            .send_json(&body)
            .and_then(|resp| resp.into_body().read_json::<Value>())
            .map_err(|e| e.to_string());
        let _ = tx.send(result);
    });

    let reply = loop {
        if cancel.load(Ordering::SeqCst) {
            return Err(PlannerError::Cancelled);
        }
        match rx.recv_timeout(POLL) {
            Ok(r) => break r,
            Err(mpsc::RecvTimeoutError::Timeout) => continue,
            Err(mpsc::RecvTimeoutError::Disconnected) => break Err("request thread died".to_string()),
        }
    };
    let reply = reply.map_err(PlannerError::PolicyUnavailable)?;
    reply["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| PlannerError::PolicyUnavailable("reply has no choices[0].message.content".into()))
}

/// Strips an optional Markdown code fence around a JSON reply.
fn unfence(text: &str) -> &str {
    let t = text.trim();
    let Some(inner) = t.strip_prefix("```") else { return t };
    let inner = inner.strip_prefix("json").unwrap_or(inner);
    inner.strip_suffix("```").unwrap_or(inner).trim()
}

/// Sends the conversation; on a reply that does not parse as `T`, asks once
/// more for strict JSON before giving up.
fn chat_json<T: for<'de> Deserialize<'de>>(
    config: &RemoteConfig,
    mut messages: Vec<Message>,
    cancel: &AtomicBool,
) -> Result<T, PlannerError> {
    let first = chat(config, &messages, cancel)?;
    if let Ok(v) = serde_json::from_str(unfence(&first)) {
        return Ok(v);
    }
    messages.push(message("assistant", &first));
    messages.push(message("user", "Reply with a single JSON object only, no prose."));
    let second = chat(config, &messages, cancel)?;
    serde_json::from_str(unfence(&second))
        .map_err(|e| PlannerError::PolicyUnavailable(format!("unparseable reply after retry: {e}")))
}

pub struct RemotePlanner {
    config: RemoteConfig,
    template: PromptTemplate,
    cancel: Arc<AtomicBool>,
}

impl RemotePlanner {
    pub fn new(config: RemoteConfig) -> Self {
        Self { config, template: PromptTemplate::default(), cancel: Arc::new(AtomicBool::new(false)) }
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = template;
        self
    }

    /// Shares a cancellation flag, typically the run's halt flag.
    pub fn with_cancel(mut self, cancel: Arc<AtomicBool>) -> Self {
        self.cancel = cancel;
        self
    }
}

impl Planner for RemotePlanner {
    fn propose(&mut self, ctx: &PlannerContext) -> Result<SymbolicAction, PlannerError> {
        let prompt =
            render_prompt(ctx, &self.template).map_err(|e| PlannerError::PolicyUnavailable(e.to_string()))?;
        let messages = vec![message("system", "You are a laboratory protocol planner."), message("user", &prompt)];
        chat_json(&self.config, messages, &self.cancel)
    }
}

#[derive(Deserialize)]
struct JudgeReply {
    verdict: String,
    #[serde(default)]
    critique: Vec<String>,
}

/// Scientific judge backed by a chat model. Not deterministic.
pub struct RemoteJudge {
    config: RemoteConfig,
}

impl RemoteJudge {
    pub fn new(config: RemoteConfig) -> Self {
        Self { config }
    }
}

impl ScientificJudge for RemoteJudge {
    fn judge(&self, draft: &ProtocolDraft, input: &JudgeInput<'_>) -> Result<VerificationReport, JudgeError> {
        let prompt = format!(
            "Task: {}\nRubric: {}\nDraft:\n{}\nReply with {{\"verdict\": \"PASS\"|\"FAIL\", \"critique\": [str]}}.",
            input.intent,
            serde_json::to_string(input.rubric).expect("rubric serializes"),
            serde_json::to_string_pretty(draft).expect("draft serializes"),
        );
        let messages = vec![message("system", "You review wet-lab protocol drafts."), message("user", &prompt)];
        let never = AtomicBool::new(false);
        let reply: JudgeReply =
            chat_json(&self.config, messages, &never).map_err(|e| JudgeError::JudgeUnavailable(e.to_string()))?;
        let passed = reply.verdict.eq_ignore_ascii_case("pass");
        let mut violations: Vec<Violation> = reply
            .critique
            .iter()
            .filter(|_| !passed)
            .map(|c| Violation {
                op_index: 0,
                constraint_path: "judge".into(),
                kind: ViolationKind::Critique,
                observed: "FAIL".into(),
                limit: "PASS".into(),
                message: c.clone(),
            })
            .collect();
        if !passed && violations.is_empty() {
            violations.push(Violation {
                op_index: 0,
                constraint_path: "judge".into(),
                kind: ViolationKind::Critique,
                observed: reply.verdict.clone(),
                limit: "PASS".into(),
                message: "judge rejected the draft".into(),
            });
        }
        Ok(VerificationReport::new(Layer::Scientific, violations, 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fsm::FsmState;
    use crate::grounding::ContextDigest;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn ctx() -> PlannerContext {
        PlannerContext {
            state: FsmState::RetrieveKnowledge,
            intent: "pellet cells".into(),
            digest: ContextDigest::default(),
            history: vec![],
            feedback: None,
            allowed: Default::default(),
            knowledge: vec![],
        }
    }

    /// Serves one canned chat reply per accepted connection.
    fn mock_server(replies: Vec<String>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for content in replies {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let reply = json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string();
                write!(
                    stream,
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    reply.len(),
                    reply
                )
                .unwrap();
            }
        });
        format!("http://{addr}/v1/chat/completions")
    }

    #[test]
    fn unreachable_endpoint_is_policy_unavailable() {
        // Bind then drop to get a port with nothing listening.
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut cfg = RemoteConfig::new(&format!("http://127.0.0.1:{port}/v1"), "m");
        cfg.timeout_s = 2.0;
        let err = RemotePlanner::new(cfg).propose(&ctx()).unwrap_err();
        assert!(matches!(err, PlannerError::PolicyUnavailable(_)), "{err:?}");
    }

    #[test]
    fn parses_fenced_action() {
        let url = mock_server(vec!["```json\n{\"kind\":\"RetrieveKnowledge\",\"query\":\"pcr\"}\n```".into()]);
        let a = RemotePlanner::new(RemoteConfig::new(&url, "m")).propose(&ctx()).unwrap();
        assert_eq!(a, SymbolicAction::RetrieveKnowledge { query: "pcr".into() });
    }

    #[test]
    fn retries_once_then_gives_up() {
        let url = mock_server(vec!["sure thing!".into(), "{\"kind\":\"Clarify\",\"question\":\"which plate?\"}".into()]);
        let a = RemotePlanner::new(RemoteConfig::new(&url, "m")).propose(&ctx()).unwrap();
        assert_eq!(a, SymbolicAction::Clarify { question: "which plate?".into() });

        let url = mock_server(vec!["no".into(), "still no".into()]);
        let err = RemotePlanner::new(RemoteConfig::new(&url, "m")).propose(&ctx()).unwrap_err();
        assert!(matches!(err, PlannerError::PolicyUnavailable(_)));
    }

    #[test]
    fn cancelled_request_returns_promptly() {
        // Accepts but never answers.
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let cancel = Arc::new(AtomicBool::new(false));
        let flag = cancel.clone();
        std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(100));
            flag.store(true, Ordering::SeqCst);
        });
        let start = std::time::Instant::now();
        let err = RemotePlanner::new(RemoteConfig::new(&url, "m")).with_cancel(cancel).propose(&ctx()).unwrap_err();
        assert_eq!(err, PlannerError::Cancelled);
        assert!(start.elapsed() < Duration::from_secs(5));
        drop(listener);
    }

    #[test]
    fn remote_judge_maps_verdict() {
        let url = mock_server(vec!["{\"verdict\":\"FAIL\",\"critique\":[\"no negative control\"]}".into()]);
        let rubric = crate::verifier::Rubric::default();
        let draft = ProtocolDraft {
            title: "t".into(),
            steps: vec![crate::protocol::DraftStep { kind: "x".into(), title: "x".into(), rationale: String::new() }],
        };
        let r = RemoteJudge::new(RemoteConfig::new(&url, "m"))
            .judge(&draft, &JudgeInput { intent: "i", rubric: &rubric })
            .unwrap();
        assert!(!r.passed);
        assert_eq!(r.violations[0].message, "no negative control");
    }
}
