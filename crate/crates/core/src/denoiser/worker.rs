//! Line-delimited JSON protocol for hosting a denoiser in another process.
//!
//! Each request is one JSON object on its own line with an `op` field; each
//! response is `{"ok": …}` or `{"error": "…"}` on one line. Latents and
//! matrices use ndarray's serde layout (`{"v":1,"dim":[…],"data":[…]}`);
//! decoded images travel as base64 PNG.

use std::io::{BufRead, BufReader, Cursor, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use base64::Engine;
use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    AttentionInjection, AttentionStore, DenoiserAdapter, ForwardOutput, Latent, LatentShape, NoiseSchedule,
    PromptEncoding,
};
use crate::attention::CrossAttentionRecord;
use crate::error::{Error, Result};

/// Environment variable holding the worker command used by the `real` adapter.
pub const WORKER_ENV: &str = "EBAMA_WORKER";

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Request {
    Describe,
    Encode {
        words: Vec<String>,
    },
    EncodeUnconditional,
    Forward {
        z: Latent,
        t: usize,
        encoding: PromptEncoding,
        injection: Option<AttentionInjection>,
    },
    Vjp {
        z: Latent,
        t: usize,
        encoding: PromptEncoding,
        grads: Vec<Array2<f64>>,
    },
    Decode {
        z: Latent,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct Description {
    name: String,
    latent_shape: LatentShape,
    schedule: NoiseSchedule,
}

#[derive(Debug, Serialize, Deserialize)]
struct ForwardWire {
    noise: Latent,
    records: Vec<CrossAttentionRecord>,
    store: AttentionStore,
}

#[derive(Debug, Serialize, Deserialize)]
struct DecodedWire {
    png_base64: String,
}

fn handle(adapter: &dyn DenoiserAdapter, req: Request) -> Result<Value> {
    Ok(match req {
        Request::Describe => serde_json::to_value(Description {
            name: adapter.name().to_string(),
            latent_shape: adapter.latent_shape(),
            schedule: adapter.schedule().clone(),
        })?,
        Request::Encode { words } => serde_json::to_value(adapter.encode_prompt(&words)?)?,
        Request::EncodeUnconditional => serde_json::to_value(adapter.encode_unconditional()?)?,
        Request::Forward {
            z,
            t,
            encoding,
            injection,
        } => {
            let out = adapter.forward(&z, t, &encoding, injection.as_ref())?;
            serde_json::to_value(ForwardWire {
                noise: out.noise,
                records: out.records,
                store: out.store,
            })?
        }
        Request::Vjp { z, t, encoding, grads } => serde_json::to_value(adapter.attention_vjp(&z, t, &encoding, &grads)?)?,
        Request::Decode { z } => {
            let img = adapter.decode(&z)?;
            let mut png = Vec::new();
            img.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)?;
            serde_json::to_value(DecodedWire {
                png_base64: base64::engine::general_purpose::STANDARD.encode(png),
            })?
        }
    })
}

/// Serves `adapter` over the worker protocol until `input` closes.
pub fn serve_worker(adapter: &dyn DenoiserAdapter, input: impl BufRead, mut output: impl Write) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(&line)
            .map_err(Error::from)
            .and_then(|req| handle(adapter, req))
        {
            Ok(v) => serde_json::json!({ "ok": v }),
            Err(e) => serde_json::json!({ "error": e.to_string() }),
        };
        serde_json::to_writer(&mut output, &response)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

struct Pipe {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Adapter backed by an external worker process.
///
/// Requests are serialized through one pipe, so concurrent generations share
/// the worker in turn.
pub struct WorkerDenoiser {
    pipe: Mutex<Pipe>,
    name: String,
    latent_shape: LatentShape,
    schedule: NoiseSchedule,
}

impl std::fmt::Debug for WorkerDenoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerDenoiser").field("name", &self.name).finish()
    }
}

impl WorkerDenoiser {
    /// Starts `command` through the shell and queries its description.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::config(format!("cannot start worker '{}': {}", command, e)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let pipe = Mutex::new(Pipe { child, stdin, stdout });
        let desc: Description = call(&pipe, &Request::Describe)
            .map_err(|e| Error::config(format!("worker '{}' did not describe itself: {}", command, e)))?;
        Ok(Self {
            pipe,
            name: desc.name,
            latent_shape: desc.latent_shape,
            schedule: desc.schedule,
        })
    }
}

fn call<T: for<'de> Deserialize<'de>>(pipe: &Mutex<Pipe>, req: &Request) -> Result<T> {
    let mut guard = pipe.lock().map_err(|_| Error::Adapter("worker pipe poisoned".into()))?;
    let p = &mut *guard;
    serde_json::to_writer(&mut p.stdin, req)?;
    p.stdin.write_all(b"\n")?;
    p.stdin.flush()?;
    let mut line = String::new();
    if p.stdout.read_line(&mut line)? == 0 {
        return Err(Error::Adapter("worker closed its output".into()));
    }
    let mut v: Value = serde_json::from_str(&line)?;
    if let Some(msg) = v.get("error") {
        return Err(Error::Adapter(msg.as_str().unwrap_or("unknown worker error").to_string()));
    }
    let ok = v
        .get_mut("ok")
        .map(Value::take)
        .ok_or_else(|| Error::Adapter("malformed worker response".into()))?;
    Ok(serde_json::from_value(ok)?)
}

impl Drop for WorkerDenoiser {
    fn drop(&mut self) {
        if let Ok(p) = self.pipe.get_mut() {
            let _ = p.child.kill();
            let _ = p.child.wait();
        }
    }
}

impl DenoiserAdapter for WorkerDenoiser {
    fn name(&self) -> &str {
        &self.name
    }

    fn latent_shape(&self) -> LatentShape {
        self.latent_shape
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn encode_prompt(&self, words: &[String]) -> Result<PromptEncoding> {
        call(&self.pipe, &Request::Encode { words: words.to_vec() })
    }

    fn encode_unconditional(&self) -> Result<PromptEncoding> {
        call(&self.pipe, &Request::EncodeUnconditional)
    }

    fn forward(
        &self,
        z: &Latent,
        t: usize,
        encoding: &PromptEncoding,
        injection: Option<&AttentionInjection>,
    ) -> Result<ForwardOutput> {
        let wire: ForwardWire = call(
            &self.pipe,
            &Request::Forward {
                z: z.clone(),
                t,
                encoding: encoding.clone(),
                injection: injection.cloned(),
            },
        )?;
        Ok(ForwardOutput {
            noise: wire.noise,
            records: wire.records,
            store: wire.store,
        })
    }

    fn attention_vjp(
        &self,
        z: &Latent,
        t: usize,
        encoding: &PromptEncoding,
        record_grads: &[Array2<f64>],
    ) -> Result<Latent> {
        call(
            &self.pipe,
            &Request::Vjp {
                z: z.clone(),
                t,
                encoding: encoding.clone(),
                grads: record_grads.to_vec(),
            },
        )
    }

    fn decode(&self, z: &Latent) -> Result<RgbImage> {
        let wire: DecodedWire = call(&self.pipe, &Request::Decode { z: z.clone() })?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(wire.png_base64)
            .map_err(|e| Error::Adapter(format!("bad image payload: {}", e)))?;
        Ok(image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?.to_rgb8())
    }
}
