//! Object proposal, segmentation and inpainting backends.
//!
//! Remote backends speak a small HTTP protocol: a `multipart/form-data` POST
//! with an `image` PNG part, an optional `mask` PNG part and a `params` JSON
//! part.
//!
//! | service   | params                 | response                           |
//! |-----------|------------------------|------------------------------------|
//! | proposer  | `{}`                   | JSON `{"names": [..], "caption": ".."}` |
//! | segmenter | `{"object": name}`     | PNG mask (non-zero = object)       |
//! | inpainter | `{"caption": caption}` | PNG image                          |

use std::time::Duration;

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ureq::unversioned::multipart::{Form, Part};

use super::pseudo::{pseudo_inpaint, PseudoInpainterParams};
use super::scene::SCENE_VOCABULARY;
use super::ObjectProposal;
use crate::error::{Error, Result};
use crate::imageops::{encode_png, hash_bytes, image_hash};
use crate::mask::Mask;

pub const PROPOSER_URL_ENV: &str = "TAMPERSCOPE_PROPOSER_URL";
pub const SEGMENTER_URL_ENV: &str = "TAMPERSCOPE_SEGMENTER_URL";
pub const INPAINTER_URL_ENV: &str = "TAMPERSCOPE_INPAINTER_URL";

pub trait ObjectProposer: Send + Sync {
    fn propose(&self, image: &RgbImage) -> Result<ObjectProposal>;
}

pub trait Segmenter: Send + Sync {
    fn segment(&self, image: &RgbImage, object: &str) -> Result<Mask>;
}

pub trait Inpainter: Send + Sync {
    fn id(&self) -> &str;
    fn inpaint(&self, image: &RgbImage, mask: &Mask, caption: &str) -> Result<RgbImage>;
}

/// Deterministic proposer: one to three vocabulary names picked from the
/// image hash.
#[derive(Clone, Debug, Default)]
pub struct StubProposer;

impl ObjectProposer for StubProposer {
    fn propose(&self, image: &RgbImage) -> Result<ObjectProposal> {
        let mut rng = ChaCha8Rng::seed_from_u64(image_hash(image));
        let n = rng.random_range(1..=3);
        let names: Vec<String> = rand::seq::index::sample(&mut rng, SCENE_VOCABULARY.len(), n)
            .into_iter()
            .map(|i| SCENE_VOCABULARY[i].to_string())
            .collect();
        let caption = format!("a scene with a {}", names.join(" and a "));
        ObjectProposal::new(names, caption)
    }
}

/// Deterministic segmenter: an axis-aligned rectangle covering 5–40% of the
/// image, seeded by the image, the object name and `seed`.
#[derive(Clone, Debug, Default)]
pub struct StubSegmenter {
    pub seed: u64,
}

impl Segmenter for StubSegmenter {
    fn segment(&self, image: &RgbImage, object: &str) -> Result<Mask> {
        check_object(object)?;
        let (h, w) = (image.height() as usize, image.width() as usize);
        let seed = hash_bytes(&[
            &self.seed.to_le_bytes(),
            &image_hash(image).to_le_bytes(),
            object.as_bytes(),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let area = rng.random_range(0.05..=0.40) * (h * w) as f64;
        let aspect: f64 = rng.random_range(0.5..=2.0);
        let rh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
        let rw = ((area / rh as f64).round() as usize).clamp(1, w);
        let r0 = rng.random_range(0..=h - rh);
        let c0 = rng.random_range(0..=w - rw);
        Ok(Mask::from_fn(h, w, |(r, c)| {
            (r0..r0 + rh).contains(&r) && (c0..c0 + rw).contains(&c)
        }))
    }
}

fn check_object(object: &str) -> Result<()> {
    if object.trim().is_empty() {
        return Err(Error::invalid("object name is empty"));
    }
    Ok(())
}

/// Local pseudo-inpainter; the caption is ignored.
#[derive(Clone, Debug)]
pub struct PseudoInpainter {
    pub params: PseudoInpainterParams,
}

impl PseudoInpainter {
    pub fn new(params: PseudoInpainterParams) -> Result<Self> {
        params.validate()?;
        Ok(PseudoInpainter { params })
    }
}

impl Inpainter for PseudoInpainter {
    fn id(&self) -> &str {
        &self.params.id
    }

    fn inpaint(&self, image: &RgbImage, mask: &Mask, _caption: &str) -> Result<RgbImage> {
        pseudo_inpaint(image, mask, &self.params)
    }
}

/// Endpoints of the remote services; any of them may be absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub proposer_url: Option<String>,
    pub segmenter_url: Option<String>,
    pub inpainter_url: Option<String>,
    /// Identifier recorded for the remote inpainter.
    #[serde(default = "default_remote_id")]
    pub inpainter_id: String,
    /// Longest image edge sent to the remote inpainter (512 or 1024).
    #[serde(default = "default_max_edge")]
    pub inpainter_max_edge: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            proposer_url: None,
            segmenter_url: None,
            inpainter_url: None,
            inpainter_id: default_remote_id(),
            inpainter_max_edge: default_max_edge(),
            timeout_secs: default_timeout(),
        }
    }
}

fn default_remote_id() -> String {
    "remote".to_string()
}

fn default_max_edge() -> u32 {
    512
}

fn default_timeout() -> f64 {
    60.0
}

impl ServiceConfig {
    /// Fills unset URLs from the environment.
    pub fn with_env(mut self) -> Self {
        let from_env = |slot: &mut Option<String>, var: &str| {
            if slot.is_none() {
                *slot = std::env::var(var).ok().filter(|v| !v.is_empty());
            }
        };
        from_env(&mut self.proposer_url, PROPOSER_URL_ENV);
        from_env(&mut self.segmenter_url, SEGMENTER_URL_ENV);
        from_env(&mut self.inpainter_url, INPAINTER_URL_ENV);
        self
    }

    fn agent(&self) -> Result<ureq::Agent> {
        if !(self.timeout_secs > 0.0) {
            return Err(Error::Configuration("timeout_secs must be positive".into()));
        }
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(self.timeout_secs)))
            .http_status_as_error(false)
            .build();
        Ok(ureq::Agent::new_with_config(config))
    }

    pub fn proposer(&self) -> Result<Option<HttpProposer>> {
        self.proposer_url
            .as_ref()
            .map(|url| {
                Ok(HttpProposer {
                    client: HttpClient::new(url, self.agent()?),
                })
            })
            .transpose()
    }

    pub fn segmenter(&self) -> Result<Option<HttpSegmenter>> {
        self.segmenter_url
            .as_ref()
            .map(|url| {
                Ok(HttpSegmenter {
                    client: HttpClient::new(url, self.agent()?),
                })
            })
            .transpose()
    }

    pub fn inpainter(&self) -> Result<Option<HttpInpainter>> {
        self.inpainter_url
            .as_ref()
            .map(|url| {
                HttpInpainter::new(
                    &self.inpainter_id,
                    HttpClient::new(url, self.agent()?),
                    self.inpainter_max_edge,
                )
            })
            .transpose()
    }
}

#[derive(Clone, Debug)]
pub struct HttpClient {
    url: String,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(url: &str, agent: ureq::Agent) -> Self {
        HttpClient {
            url: url.to_string(),
            agent,
        }
    }

    /// POSTs the form and returns (status, body bytes).
    fn post(
        &self,
        image: &[u8],
        mask: Option<&[u8]>,
        params: &serde_json::Value,
    ) -> Result<(u16, Vec<u8>)> {
        let params = params.to_string();
        let mut form = Form::new()
            .part(
                "image",
                Part::bytes(image)
                    .file_name("image.png")
                    .mime_str("image/png")
                    .map_err(remote)?,
            )
            .part(
                "params",
                Part::text(&params)
                    .mime_str("application/json")
                    .map_err(remote)?,
            );
        if let Some(mask) = mask {
            form = form.part(
                "mask",
                Part::bytes(mask)
                    .file_name("mask.png")
                    .mime_str("image/png")
                    .map_err(remote)?,
            );
        }
        let mut resp = self.agent.post(&self.url).send(form).map_err(remote)?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .with_config()
            .limit(256 * 1024 * 1024)
            .read_to_vec()
            .map_err(remote)?;
        Ok((status, body))
    }

    fn expect_ok(&self, status: u16, body: &[u8]) -> Result<()> {
        if (200..300).contains(&status) {
            Ok(())
        } else {
            Err(Error::ExternalService(format!(
                "{} answered {status}: {}",
                self.url,
                String::from_utf8_lossy(&body[..body.len().min(200)])
            )))
        }
    }
}

fn remote(e: ureq::Error) -> Error {
    Error::ExternalService(e.to_string())
}

fn png_bytes(image: &RgbImage) -> Result<Vec<u8>> {
    encode_png(&DynamicImage::ImageRgb8(image.clone()))
}

pub struct HttpProposer {
    client: HttpClient,
}

impl ObjectProposer for HttpProposer {
    fn propose(&self, image: &RgbImage) -> Result<ObjectProposal> {
        let (status, body) = self
            .client
            .post(&png_bytes(image)?, None, &serde_json::json!({}))?;
        self.client.expect_ok(status, &body)?;
        let p: ObjectProposal = serde_json::from_slice(&body)
            .map_err(|e| Error::ExternalService(format!("malformed proposer response: {e}")))?;
        ObjectProposal::new(p.names, p.caption).map_err(|e| Error::ExternalService(e.to_string()))
    }
}

pub struct HttpSegmenter {
    client: HttpClient,
}

impl Segmenter for HttpSegmenter {
    fn segment(&self, image: &RgbImage, object: &str) -> Result<Mask> {
        check_object(object)?;
        let (status, body) = self.client.post(
            &png_bytes(image)?,
            None,
            &serde_json::json!({ "object": object }),
        )?;
        if status == 404 {
            return Err(Error::NotFound(format!("no mask for {object:?}")));
        }
        self.client.expect_ok(status, &body)?;
        let gray = decode(&body)?.to_luma8();
        let mut mask = Mask::from_gray(&gray);
        if mask.dims() != (image.height() as usize, image.width() as usize) {
            mask = mask.resize_nearest(image.height() as usize, image.width() as usize);
        }
        if mask.count() == 0 {
            return Err(Error::NotFound(format!(
                "segmenter returned an empty mask for {object:?}"
            )));
        }
        Ok(mask)
    }
}

fn decode(bytes: &[u8]) -> Result<DynamicImage> {
    image::load_from_memory(bytes)
        .map_err(|e| Error::ExternalService(format!("undecodable image: {e}")))
}

/// Remote inpainter. Inputs are resized so their longest edge equals
/// `max_edge`; the response is resized back to the original size.
pub struct HttpInpainter {
    id: String,
    client: HttpClient,
    max_edge: u32,
}

impl HttpInpainter {
    pub fn new(id: &str, client: HttpClient, max_edge: u32) -> Result<Self> {
        if max_edge != 512 && max_edge != 1024 {
            return Err(Error::Configuration(format!(
                "inpainter max edge must be 512 or 1024, got {max_edge}"
            )));
        }
        if id.is_empty() {
            return Err(Error::Configuration("inpainter id is empty".into()));
        }
        Ok(HttpInpainter {
            id: id.to_string(),
            client,
            max_edge,
        })
    }
}

/// Size with the longest edge scaled to `max_edge`, aspect preserved.
pub fn longest_edge_size(width: u32, height: u32, max_edge: u32) -> (u32, u32) {
    let scale = max_edge as f64 / width.max(height) as f64;
    (
        ((width as f64 * scale).round() as u32).max(1),
        ((height as f64 * scale).round() as u32).max(1),
    )
}

impl Inpainter for HttpInpainter {
    fn id(&self) -> &str {
        &self.id
    }

    fn inpaint(&self, image: &RgbImage, mask: &Mask, caption: &str) -> Result<RgbImage> {
        let (w, h) = image.dimensions();
        let (sw, sh) = longest_edge_size(w, h, self.max_edge);
        let sent = image::imageops::resize(image, sw, sh, FilterType::Triangle);
        let sent_mask: GrayImage = mask.resize_nearest(sh as usize, sw as usize).to_gray();
        let (status, body) = self.client.post(
            &png_bytes(&sent)?,
            Some(&encode_png(&DynamicImage::ImageLuma8(sent_mask))?),
            &serde_json::json!({ "caption": caption }),
        )?;
        self.client.expect_ok(status, &body)?;
        let out = decode(&body)?.to_rgb8();
        Ok(if out.dimensions() == (w, h) {
            out
        } else {
            image::imageops::resize(&out, w, h, FilterType::Triangle)
        })
    }
}
