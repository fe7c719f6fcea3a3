//! Client side of the out-of-process segmenter protocol.
//!
//! One JSON object per line on the child's stdin, one response line per
//! request on its stdout, in request order:
//!
//! ```text
//! → {"id":"0","image_path":"scenes/0/image.png","prompts":[{"bbox":[x1,y1,x2,y2],"points":[[x,y]],"labels":[1]}],"schema":"bbox_pos2"}
//! ← {"id":"0","ok":true,"mask":{"width":W,"height":H,"counts":[...]}}
//! ← {"id":"0","ok":false,"error":{"code":"image_missing","detail":"..."}}
//! ```

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{rle_decode, BinaryMask, Polarity, RleMask};
use crate::protocol::{InstancePrompt, PromptSchema, PromptSet};
use crate::scene::Scene;
use crate::segmenter::SegmenterBackend;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WirePrompt {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[usize; 4]>,
    pub points: Vec<[usize; 2]>,
    /// 1 = positive, 0 = negative; one per point.
    pub labels: Vec<u8>,
}

impl From<&InstancePrompt> for WirePrompt {
    fn from(p: &InstancePrompt) -> Self {
        WirePrompt {
            bbox: p.bbox.map(|b| [b.x1, b.y1, b.x2, b.y2]),
            points: p.points.iter().map(|q| [q.x, q.y]).collect(),
            labels: p
                .points
                .iter()
                .map(|q| u8::from(q.polarity == Polarity::Positive))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeRequest {
    pub id: String,
    pub image_path: String,
    pub prompts: Vec<WirePrompt>,
    pub schema: String,
}

impl BridgeRequest {
    pub fn new(
        id: impl Into<String>,
        image_path: impl Into<String>,
        prompts: &PromptSet,
        schema: &PromptSchema,
    ) -> Self {
        BridgeRequest {
            id: id.into(),
            image_path: image_path.into(),
            prompts: prompts.instances.iter().map(WirePrompt::from).collect(),
            schema: schema.mode.as_str().to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeErrorCode {
    BadRequest,
    ImageMissing,
    ModelFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeError {
    pub code: BridgeErrorCode,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeResponse {
    pub id: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<RleMask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<BridgeError>,
}

impl BridgeResponse {
    /// Decodes a successful response, checking the id and canvas.
    pub fn into_mask(self, expected_id: &str, width: usize, height: usize) -> Result<BinaryMask> {
        if self.id != expected_id {
            return Err(Error::Bridge(format!(
                "response id '{}' does not match request '{expected_id}'",
                self.id
            )));
        }
        if !self.ok {
            let e = self.error.unwrap_or(BridgeError {
                code: BridgeErrorCode::ModelFailure,
                detail: "no error detail".into(),
            });
            return Err(Error::Bridge(format!("{:?}: {}", e.code, e.detail)));
        }
        let rle = self
            .mask
            .ok_or_else(|| Error::Bridge("ok response without a mask".into()))?;
        let m = rle_decode(&rle)?;
        if m.width() != width || m.height() != height {
            return Err(Error::Bridge(format!(
                "mask is {}x{}, scene canvas is {width}x{height}",
                m.width(),
                m.height()
            )));
        }
        Ok(m)
    }
}

struct Pipe {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

/// Segmenter backed by a child process speaking the line protocol.
pub struct BridgeSegmenter {
    command: String,
    pipe: Mutex<Pipe>,
    next_id: AtomicU64,
}

impl BridgeSegmenter {
    /// Spawns `command` through `sh -c`.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Bridge(format!("failed to start '{command}': {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(BridgeSegmenter {
            command: command.to_string(),
            pipe: Mutex::new(Pipe {
                child,
                stdin: Some(stdin),
                stdout,
            }),
            next_id: AtomicU64::new(0),
        })
    }

    pub fn request(&self, req: &BridgeRequest) -> Result<BridgeResponse> {
        let mut line = serde_json::to_string(req).map_err(|e| Error::Bridge(e.to_string()))?;
        line.push('\n');
        let mut pipe = self
            .pipe
            .lock()
            .map_err(|_| Error::Bridge("bridge pipe poisoned".into()))?;
        let stdin = pipe
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Bridge("bridge input already closed".into()))?;
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| Error::Bridge(format!("write to '{}' failed: {e}", self.command)))?;
        let mut resp = String::new();
        let n = pipe
            .stdout
            .read_line(&mut resp)
            .map_err(|e| Error::Bridge(format!("read from '{}' failed: {e}", self.command)))?;
        if n == 0 {
            return Err(Error::Bridge(format!(
                "'{}' closed its output",
                self.command
            )));
        }
        serde_json::from_str(&resp).map_err(|e| Error::Bridge(format!("unparseable response: {e}")))
    }
}

impl Drop for BridgeSegmenter {
    fn drop(&mut self) {
        if let Ok(pipe) = self.pipe.get_mut() {
            // closing stdin ends the child's input loop
            drop(pipe.stdin.take());
            let _ = pipe.child.wait();
        }
    }
}

impl SegmenterBackend for BridgeSegmenter {
    fn name(&self) -> String {
        format!("bridge:{}", self.command)
    }

    fn execute(
        &self,
        scene: &Scene,
        prompt: &InstancePrompt,
        schema: &PromptSchema,
    ) -> Result<BinaryMask> {
        self.execute_set(scene, &PromptSet::new(vec![prompt.clone()]), schema)
    }

    fn execute_set(
        &self,
        scene: &Scene,
        prompts: &PromptSet,
        schema: &PromptSchema,
    ) -> Result<BinaryMask> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed).to_string();
        let image = scene
            .image
            .as_ref()
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_default();
        let resp = self.request(&BridgeRequest::new(id.clone(), image, prompts, schema))?;
        resp.into_mask(&id, scene.width, scene.height)
    }
}
