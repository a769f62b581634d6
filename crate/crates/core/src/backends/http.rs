//! Blocking HTTP transport shared by both wire protocols.
//!
//! Only transport-class failures (connect errors, timeouts, 5xx, 429) are
//! retried, with exponential backoff. 401 and 403 surface as auth errors
//! immediately. The API key is read from the environment variable named in
//! the config; it travels in the Authorization header and appears in no
//! error message or file.

use std::time::{Duration, Instant};

use super::{
    build_request_body, parse_response_body, BackendConfig, BackendError, BackendKind,
    ChatBackend, ChatExchange,
};
use crate::ledger::{ChatMessage, ToolDefinition};

pub struct HttpBackend {
    config: BackendConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

pub(crate) fn join_url(endpoint: &str, path: &str) -> String {
    let trimmed = endpoint.trim_end_matches('/');
    if trimmed.ends_with(path) {
        trimmed.to_string()
    } else {
        format!("{trimmed}{path}")
    }
}

fn snippet(text: &str) -> String {
    text.chars().take(200).collect()
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        let api_key = match config.api_key_env.as_deref() {
            Some(var) if !var.is_empty() => std::env::var(var).ok(),
            _ => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpBackend { config, client, api_key })
    }

    fn url(&self) -> String {
        let path = match self.config.kind {
            BackendKind::OpenaiCompat => "/v1/chat/completions",
            BackendKind::Ollama => "/api/chat",
            BackendKind::Replay => "",
        };
        join_url(&self.config.endpoint, path)
    }

    fn send(&self, url: &str, body: &str) -> Result<String, BackendError> {
        let mut request = self
            .client
            .post(url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_string());
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if status == reqwest::StatusCode::UNAUTHORIZED
            || status == reqwest::StatusCode::FORBIDDEN
        {
            return Err(BackendError::Auth(format!("http {status}")));
        }
        if status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS {
            return Err(BackendError::Transport(format!("http {status}: {}", snippet(&text))));
        }
        if !status.is_success() {
            return Err(BackendError::Protocol(format!("http {status}: {}", snippet(&text))));
        }
        Ok(text)
    }
}

impl ChatBackend for HttpBackend {
    fn complete(
        &mut self,
        messages: &[ChatMessage],
        tools: &[&ToolDefinition],
    ) -> Result<ChatExchange, BackendError> {
        let body = build_request_body(&self.config, messages, tools)?;
        let url = self.url();
        let mut attempt: u32 = 0;
        loop {
            let started = Instant::now();
            match self.send(&url, &body) {
                Ok(text) => {
                    return parse_response_body(
                        self.config.kind,
                        &text,
                        started.elapsed().as_secs_f64(),
                        messages.len(),
                    )
                }
                Err(e) => {
                    let retryable = matches!(e, BackendError::Transport(_));
                    if !retryable || attempt >= self.config.max_retries {
                        return Err(e);
                    }
                    let delay =
                        self.config.retry_backoff_ms.saturating_mul(1u64 << attempt.min(16));
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    /// One-shot HTTP server: answers each connection with the next canned
    /// response, then returns the raw requests it saw.
    fn serve(responses: Vec<String>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for body in responses {
                let (mut stream, _) = listener.accept().unwrap();
                seen.push(read_request(&mut stream));
                let payload = format!(
                    "{body}\r\nContent-Length: 0\r\nConnection: close\r\n\r\n"
                );
                stream.write_all(payload.as_bytes()).unwrap();
            }
            seen
        });
        (format!("http://{addr}"), handle)
    }

    fn serve_json(statuses: Vec<(&'static str, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in statuses {
                let (mut stream, _) = listener.accept().unwrap();
                seen.push(read_request(&mut stream));
                let payload = format!(
                    "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(payload.as_bytes()).unwrap();
            }
            seen
        });
        (format!("http://{addr}"), handle)
    }

    fn read_request(stream: &mut std::net::TcpStream) -> String {
        let mut buf = Vec::new();
        let mut chunk = [0u8; 1024];
        loop {
            let n = stream.read(&mut chunk).unwrap();
            buf.extend_from_slice(&chunk[..n]);
            let text = String::from_utf8_lossy(&buf);
            if let Some(head_end) = text.find("\r\n\r\n") {
                let content_length = text
                    .lines()
                    .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                    .unwrap_or(0);
                if buf.len() >= head_end + 4 + content_length {
                    return text.into_owned();
                }
            }
            if n == 0 {
                return text.into_owned();
            }
        }
    }

    fn config(endpoint: &str) -> BackendConfig {
        BackendConfig {
            kind: BackendKind::OpenaiCompat,
            endpoint: endpoint.into(),
            model: "test-model".into(),
            api_key_env: None,
            temperature: 0.0,
            tool_mode: super::super::ToolMode::Native,
            request_timeout_secs: 10,
            max_retries: 2,
            retry_backoff_ms: 1,
            script: None,
        }
    }

    fn ok_body() -> String {
        r#"{"choices":[{"message":{"content":"hello"}}],"usage":{"prompt_tokens":10,"completion_tokens":2}}"#
            .to_string()
    }

    fn messages() -> Vec<ChatMessage> {
        vec![ChatMessage::system("p", 0), ChatMessage::user("q", 1)]
    }

    #[test]
    fn url_joining_is_idempotent() {
        assert_eq!(
            join_url("http://localhost:8000", "/v1/chat/completions"),
            "http://localhost:8000/v1/chat/completions"
        );
        assert_eq!(
            join_url("http://localhost:8000/", "/v1/chat/completions"),
            "http://localhost:8000/v1/chat/completions"
        );
        assert_eq!(
            join_url("http://host/v1/chat/completions", "/v1/chat/completions"),
            "http://host/v1/chat/completions"
        );
        assert_eq!(join_url("http://localhost:11434", "/api/chat"), "http://localhost:11434/api/chat");
    }

    #[test]
    fn round_trip_success() {
        let (endpoint, server) = serve_json(vec![("200 OK", ok_body())]);
        let mut backend = HttpBackend::new(config(&endpoint)).unwrap();
        let ex = backend.complete(&messages(), &[]).unwrap();
        assert_eq!(ex.assistant_text, "hello");
        assert_eq!(ex.usage.unwrap().input_tokens, 10);
        let seen = server.join().unwrap();
        assert!(seen[0].starts_with("POST /v1/chat/completions"));
        assert!(seen[0].contains("\"model\":\"test-model\""));
    }

    #[test]
    fn transport_errors_are_retried_until_success() {
        let (endpoint, server) = serve_json(vec![
            ("500 Internal Server Error", "{}".to_string()),
            ("503 Service Unavailable", "{}".to_string()),
            ("200 OK", ok_body()),
        ]);
        let mut backend = HttpBackend::new(config(&endpoint)).unwrap();
        let ex = backend.complete(&messages(), &[]).unwrap();
        assert_eq!(ex.assistant_text, "hello");
        assert_eq!(server.join().unwrap().len(), 3);
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let (endpoint, server) = serve_json(vec![("401 Unauthorized", "{}".to_string())]);
        let mut backend = HttpBackend::new(config(&endpoint)).unwrap();
        let err = backend.complete(&messages(), &[]).unwrap_err();
        assert!(matches!(err, BackendError::Auth(_)), "{err}");
        assert_eq!(server.join().unwrap().len(), 1);
    }

    #[test]
    fn client_errors_are_protocol_not_retried() {
        let (endpoint, server) = serve_json(vec![("404 Not Found", "{}".to_string())]);
        let mut backend = HttpBackend::new(config(&endpoint)).unwrap();
        let err = backend.complete(&messages(), &[]).unwrap_err();
        assert!(matches!(err, BackendError::Protocol(_)), "{err}");
        assert_eq!(server.join().unwrap().len(), 1);
    }

    #[test]
    fn api_key_is_sent_as_bearer_and_never_surfaces_in_errors() {
        let var = "EOFLOW_TEST_KEY_HTTP_RS";
        std::env::set_var(var, "sk-test-secret-9f1");
        let (endpoint, server) = serve_json(vec![("401 Unauthorized", "{}".to_string())]);
        let mut cfg = config(&endpoint);
        cfg.api_key_env = Some(var.into());
        let mut backend = HttpBackend::new(cfg).unwrap();
        let err = backend.complete(&messages(), &[]).unwrap_err();
        assert!(!err.to_string().contains("sk-test-secret-9f1"));
        let seen = server.join().unwrap();
        let lowered = seen[0].to_ascii_lowercase();
        assert!(lowered.contains("authorization: bearer sk-test-secret-9f1"));
        // The key rides in the header, never the JSON body.
        let body = seen[0].split("\r\n\r\n").nth(1).unwrap();
        assert!(!body.contains("sk-test-secret-9f1"));
        std::env::remove_var(var);
    }

    #[test]
    fn missing_key_env_means_no_auth_header() {
        let (endpoint, server) = serve_json(vec![("200 OK", ok_body())]);
        let mut cfg = config(&endpoint);
        cfg.api_key_env = Some("EOFLOW_TEST_KEY_UNSET_VAR".into());
        let mut backend = HttpBackend::new(cfg).unwrap();
        backend.complete(&messages(), &[]).unwrap();
        let seen = server.join().unwrap();
        assert!(!seen[0].to_ascii_lowercase().contains("authorization:"));
    }

    #[test]
    fn malformed_status_line_is_transport() {
        let (endpoint, _server) = serve(vec!["BOGUS".to_string()]);
        let mut cfg = config(&endpoint);
        cfg.max_retries = 0;
        let mut backend = HttpBackend::new(cfg).unwrap();
        let err = backend.complete(&messages(), &[]).unwrap_err();
        assert!(matches!(err, BackendError::Transport(_)), "{err}");
    }
}
