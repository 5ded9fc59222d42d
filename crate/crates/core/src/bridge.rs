//! Client for external models served over line-delimited JSON on stdio.
//!
//! ```text
//! -> {"op":"hello","d":3}        <- {"ok":true,"d":3}
//! -> {"op":"predict","x":[[..]]} <- {"y":[..]}   or   {"error":"..."}
//! ```

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{AttrError, Result};
use crate::model::{Model, OutputKind};

#[derive(Serialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum Request<'a> {
    Hello { d: usize },
    Predict { x: &'a [Vec<f64>] },
}

#[derive(Deserialize)]
struct Hello {
    ok: bool,
    d: usize,
}

struct Channel {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    line: String,
}

impl Channel {
    fn exchange(&mut self, request: &Request<'_>) -> std::io::Result<Option<&str>> {
        let mut text = serde_json::to_string(request).map_err(std::io::Error::other)?;
        text.push('\n');
        self.stdin.write_all(text.as_bytes())?;
        self.stdin.flush()?;
        self.line.clear();
        if self.stdout.read_line(&mut self.line)? == 0 {
            return Ok(None);
        }
        Ok(Some(self.line.trim_end()))
    }
}

/// A model evaluated by a child process. Requests are serialized.
pub struct BridgeModel {
    d: usize,
    kind: OutputKind,
    channel: Mutex<Channel>,
}

impl BridgeModel {
    /// Runs `command` through `sh -c` and performs the handshake.
    pub fn spawn(command: &str, d: usize) -> Result<Self> {
        let mut cmd = Command::new("sh");
        cmd.arg("-c").arg(command);
        Self::from_command(cmd, d)
    }

    pub fn from_command(mut command: Command, d: usize) -> Result<Self> {
        let mut child = command
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| AttrError::BridgeHandshake(format!("cannot start bridge: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut channel = Channel { child, stdin, stdout, line: String::new() };
        let reply = channel
            .exchange(&Request::Hello { d })
            .map_err(|e| AttrError::BridgeHandshake(e.to_string()))?
            .ok_or_else(|| AttrError::BridgeHandshake("bridge closed before answering".into()))?
            .to_owned();
        let hello: Hello = serde_json::from_str(&reply)
            .map_err(|_| AttrError::BridgeHandshake(format!("unexpected reply {reply:?}")))?;
        if !hello.ok || hello.d != d {
            return Err(AttrError::BridgeHandshake(format!("bridge reported d = {}, expected {d}", hello.d)));
        }
        Ok(Self { d, kind: OutputKind::Regression, channel: Mutex::new(channel) })
    }

    pub fn with_output_kind(mut self, kind: OutputKind) -> Self {
        self.kind = kind;
        self
    }
}

impl Model for BridgeModel {
    fn n_features(&self) -> usize {
        self.d
    }

    fn output_kind(&self) -> OutputKind {
        self.kind
    }

    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
        let mut channel = self.channel.lock().map_err(|_| AttrError::EvaluationFailure("bridge lock poisoned".into()))?;
        let reply = channel
            .exchange(&Request::Predict { x: &rows })
            .map_err(|e| AttrError::EvaluationFailure(format!("bridge i/o: {e}")))?
            .ok_or_else(|| AttrError::EvaluationFailure("bridge closed".into()))?;
        let value: Value = serde_json::from_str(reply)
            .map_err(|e| AttrError::EvaluationFailure(format!("malformed bridge reply: {e}")))?;
        if let Some(msg) = value.get("error") {
            let msg = msg.as_str().map_or_else(|| msg.to_string(), str::to_owned);
            return Err(AttrError::EvaluationFailure(msg));
        }
        let y = value
            .get("y")
            .and_then(Value::as_array)
            .ok_or_else(|| AttrError::EvaluationFailure(format!("bridge reply lacks \"y\": {reply}")))?;
        y.iter()
            .map(|v| v.as_f64().ok_or_else(|| AttrError::EvaluationFailure(format!("non-numeric output {v}"))))
            .collect()
    }
}

impl Drop for BridgeModel {
    fn drop(&mut self) {
        if let Ok(channel) = self.channel.get_mut() {
            let _ = channel.child.kill();
            let _ = channel.child.wait();
        }
    }
}
