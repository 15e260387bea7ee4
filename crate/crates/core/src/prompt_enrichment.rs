//! Caption providers and the hashed n-gram text embedder behind the edit
//! direction.

use std::time::{Duration, Instant};

use base64::Engine;
use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion_toy::{brightness_word, radius_probe, Sample, Shape, ToyImage, BACKGROUND};
use crate::error::{Error, Result};

pub const EMBED_DIM: usize = 64;
const SALT: &[u8] = b"geoedit-embed-v1";
/// Environment variable holding the bearer token of the HTTP backend.
pub const API_KEY_ENV: &str = "GEOEDIT_CAPTION_API_KEY";

/// Known labels of a synthetic sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeLabels {
    pub shape: Shape,
    pub brightness: f64,
    pub radius: f64,
}

impl From<&Sample> for ShapeLabels {
    fn from(s: &Sample) -> Self {
        Self {
            shape: s.shape,
            brightness: s.brightness,
            radius: s.radius,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaptionRequest {
    pub image: ToyImage,
    /// Used by the mock backend when present; otherwise it estimates them.
    pub labels: Option<ShapeLabels>,
    pub instruction: String,
}

impl CaptionRequest {
    pub fn new(image: ToyImage, labels: Option<ShapeLabels>, instruction: &str) -> Result<Self> {
        if instruction.trim().is_empty() {
            return Err(Error::contract("caption instruction is empty"));
        }
        Ok(Self {
            image,
            labels,
            instruction: instruction.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Caption {
    pub text: String,
    pub provider: String,
    pub latency_ms: f64,
    /// The provider failed and `text` is the un-enriched base text.
    pub fallback: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Mock,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderConfig {
    pub backend: Backend,
    /// Chat-completions URL, required for the HTTP backend.
    pub endpoint: Option<String>,
    pub model: String,
    pub timeout_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Mock,
            endpoint: None,
            model: "qwen2-vl".into(),
            timeout_ms: 10_000,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        match self.backend {
            Backend::Mock => Ok(()),
            Backend::Http => match &self.endpoint {
                Some(u) if u.starts_with("http://") || u.starts_with("https://") => {
                    if self.timeout_ms == 0 {
                        Err(Error::Config("caption timeout must be positive".into()))
                    } else {
                        Ok(())
                    }
                }
                Some(u) => Err(Error::Config(format!("caption endpoint {u:?} is not an http(s) URL"))),
                None => Err(Error::Config("http caption backend needs an endpoint".into())),
            },
        }
    }
}

/// Template caption from labels, e.g. "a bright small disc on dark
/// background".
pub fn mock_caption(labels: &ShapeLabels) -> String {
    let size = if labels.radius < 6.0 { "small" } else { "large" };
    format!(
        "a {} {size} {} on dark background",
        brightness_word(labels.brightness),
        labels.shape.name()
    )
}

/// Caption of the requested edit outcome: the source caption with the
/// attribute word set to its high end ("bright" or "large").
pub fn target_caption(labels: &ShapeLabels, attr: crate::diffusion_toy::Attribute) -> String {
    let mut l = *labels;
    match attr {
        crate::diffusion_toy::Attribute::Brightness => l.brightness = 1.0,
        crate::diffusion_toy::Attribute::Radius => l.radius = l.radius.max(6.0),
    }
    mock_caption(&l)
}

/// Labels read off the pixels: brightness from the mean of non-background
/// pixels, radius from their area. The shape is reported as a disc.
pub fn estimate_labels(img: &ToyImage) -> ShapeLabels {
    let fg: Vec<f64> = img.data().iter().copied().filter(|&v| v > BACKGROUND + 0.2).collect();
    let brightness = if fg.is_empty() {
        0.0
    } else {
        ((fg.iter().sum::<f64>() / fg.len() as f64 + 0.6) / 1.6).clamp(0.0, 1.0)
    };
    ShapeLabels {
        shape: Shape::Disc,
        brightness,
        radius: radius_probe(img),
    }
}

/// Grayscale PNG of the image.
pub fn encode_png(img: &ToyImage) -> Result<Vec<u8>> {
    let side = crate::diffusion_toy::SIDE as u32;
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, side, side);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Parse(format!("png: {e}")))?;
        w.write_image_data(&bytes).map_err(|e| Error::Parse(format!("png: {e}")))?;
    }
    Ok(out)
}

/// OpenAI-style chat-completion body with one user message holding the
/// instruction and the image as a base64 data URL.
pub fn chat_request_body(model: &str, req: &CaptionRequest) -> Result<serde_json::Value> {
    let b64 = base64::engine::general_purpose::STANDARD.encode(encode_png(&req.image)?);
    Ok(serde_json::json!({
        "model": model,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "text", "text": req.instruction},
                {"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{b64}")}}
            ]
        }]
    }))
}

fn http_caption(req: &CaptionRequest, cfg: &ProviderConfig) -> Result<String> {
    let url = cfg.endpoint.as_deref().expect("validated");
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
        .http_status_as_error(false)
        .build()
        .into();
    let mut call = agent.post(url).header("Content-Type", "application/json");
    if let Ok(key) = std::env::var(API_KEY_ENV) {
        call = call.header("Authorization", &format!("Bearer {key}"));
    }
    let body = chat_request_body(&cfg.model, req)?;
    let mut resp = call.send_json(&body).map_err(|e| Error::Provider {
        status: None,
        message: e.to_string(),
    })?;
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().map_err(|e| Error::Provider {
        status: Some(status),
        message: e.to_string(),
    })?;
    if !(200..300).contains(&status) {
        return Err(Error::Provider {
            status: Some(status),
            message: text.chars().take(200).collect(),
        });
    }
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Provider {
        status: Some(status),
        message: format!("bad JSON: {e}"),
    })?;
    let content = v["choices"][0]["message"]["content"].as_str().unwrap_or("").trim();
    if content.is_empty() {
        return Err(Error::Provider {
            status: Some(status),
            message: "response has no message content".into(),
        });
    }
    Ok(content.to_string())
}

/// One caption from the configured backend.
pub fn enrich(req: &CaptionRequest, cfg: &ProviderConfig) -> Result<Caption> {
    cfg.validate()?;
    let t = Instant::now();
    let (text, provider) = match cfg.backend {
        Backend::Mock => {
            let labels = req.labels.unwrap_or_else(|| estimate_labels(&req.image));
            (mock_caption(&labels), "mock".to_string())
        }
        Backend::Http => (http_caption(req, cfg)?, format!("http:{}", cfg.model)),
    };
    Ok(Caption {
        text,
        provider,
        latency_ms: t.elapsed().as_secs_f64() * 1e3,
        fallback: false,
    })
}

/// [`enrich`], falling back to `base_text` when the provider fails.
/// Configuration errors are still returned.
pub fn enrich_or_fallback(req: &CaptionRequest, cfg: &ProviderConfig, base_text: &str) -> Result<Caption> {
    cfg.validate()?;
    let t = Instant::now();
    match enrich(req, cfg) {
        Err(e @ Error::Provider { .. }) => {
            warn!("caption provider failed, using base text: {e}");
            Ok(Caption {
                text: base_text.to_string(),
                provider: "fallback".into(),
                latency_ms: t.elapsed().as_secs_f64() * 1e3,
                fallback: true,
            })
        }
        r => r,
    }
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(|w| w.to_lowercase()).collect()
}

fn bucket(gram: &str) -> (usize, f64) {
    let mut h = Sha256::new();
    h.update(SALT);
    h.update(gram.as_bytes());
    let d = h.finalize();
    let idx = u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % EMBED_DIM as u64;
    let sign = if d[8] & 1 == 0 { 1.0 } else { -1.0 };
    (idx as usize, sign)
}

/// Unit vector in ℝ⁶⁴ from signed hashed unigrams (weight 1) and bigrams
/// (weight 0.5) of the case-folded, whitespace-split text.
pub fn embed_text(s: &str) -> Result<Vec<f64>> {
    let toks = tokens(s);
    if toks.is_empty() {
        return Err(Error::contract("cannot embed empty text"));
    }
    let mut v = vec![0.0; EMBED_DIM];
    for t in &toks {
        let (i, sgn) = bucket(t);
        v[i] += sgn;
    }
    for w in toks.windows(2) {
        let (i, sgn) = bucket(&format!("{} {}", w[0], w[1]));
        v[i] += 0.5 * sgn;
    }
    let n = crate::tensor::norm(&v);
    if n == 0.0 {
        return Err(Error::Degenerate(format!("hashed features of {s:?} cancel")));
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

/// `normalize(embed(target) − embed(source))`.
pub fn edit_direction(source: &str, target: &str) -> Result<Vec<f64>> {
    let (a, b) = (embed_text(source)?, embed_text(target)?);
    let d: Vec<f64> = b.iter().zip(&a).map(|(t, s)| t - s).collect();
    let n = crate::tensor::norm(&d);
    if n < 1e-12 {
        return Err(Error::Degenerate(format!("edit {source:?} -> {target:?} has no direction")));
    }
    Ok(d.into_iter().map(|x| x / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::cosine;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn disc() -> Sample {
        Sample::render(Shape::Disc, 0.9, 4.5, (16.0, 16.0)).unwrap()
    }

    #[test]
    fn mock_caption_from_labels() {
        let s = disc();
        let req = CaptionRequest::new(s.image.clone(), Some((&s).into()), "describe").unwrap();
        let c = enrich(&req, &ProviderConfig::default()).unwrap();
        assert_eq!(c.text, "a bright small disc on dark background");
        assert_eq!(c.provider, "mock");
        assert!(!c.fallback);
        assert_eq!(enrich(&req, &ProviderConfig::default()).unwrap().text, c.text);
    }

    #[test]
    fn target_caption_sets_attribute_word() {
        let s = Sample::render(Shape::Square, 0.1, 7.0, (16.0, 16.0)).unwrap();
        let l: ShapeLabels = (&s).into();
        assert_eq!(mock_caption(&l), "a dim large square on dark background");
        assert_eq!(
            target_caption(&l, crate::diffusion_toy::Attribute::Brightness),
            "a bright large square on dark background"
        );
    }

    #[test]
    fn mock_estimates_labels_from_pixels() {
        let s = disc();
        let l = estimate_labels(&s.image);
        assert!((l.brightness - 0.9).abs() < 1e-12);
        assert!((l.radius - 4.5).abs() < 0.5);
    }

    #[test]
    fn empty_instruction_rejected() {
        assert!(CaptionRequest::new(ToyImage::filled(0.0), None, "  ").is_err());
    }

    #[test]
    fn http_config_validation() {
        let mut cfg = ProviderConfig {
            backend: Backend::Http,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.endpoint = Some("ftp://x".into());
        assert!(cfg.validate().is_err());
        cfg.endpoint = Some("http://127.0.0.1:9/v1/chat/completions".into());
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unreachable_endpoint_falls_back() {
        let cfg = ProviderConfig {
            backend: Backend::Http,
            endpoint: Some("http://127.0.0.1:9/v1/chat/completions".into()),
            timeout_ms: 500,
            ..Default::default()
        };
        let req = CaptionRequest::new(disc().image, None, "describe").unwrap();
        assert!(matches!(enrich(&req, &cfg), Err(Error::Provider { status: None, .. })));
        let c = enrich_or_fallback(&req, &cfg, "a shape").unwrap();
        assert!(c.fallback);
        assert_eq!(c.text, "a shape");
    }

    #[test]
    fn request_body_shape() {
        let req = CaptionRequest::new(disc().image, None, "describe the shape").unwrap();
        let v = chat_request_body("m", &req).unwrap();
        assert_eq!(v["model"], "m");
        let content = &v["messages"][0]["content"];
        assert_eq!(content[0]["text"], "describe the shape");
        let url = content[1]["image_url"]["url"].as_str().unwrap();
        let png = base64::engine::general_purpose::STANDARD
            .decode(url.strip_prefix("data:image/png;base64,").unwrap())
            .unwrap();
        assert_eq!(&png[1..4], b"PNG");
    }

    #[test]
    fn embedding_examples() {
        assert_eq!(embed_text("a").unwrap(), embed_text("a").unwrap());
        assert_eq!(embed_text("Bright  DISC").unwrap(), embed_text("bright disc").unwrap());
        let c = cosine(&embed_text("bright disc").unwrap(), &embed_text("dark disc").unwrap());
        assert!(c < 1.0 - 1e-6, "{c}");
        assert!(matches!(embed_text(" \t"), Err(Error::Contract(_))));
    }

    #[test]
    fn random_strings_embed_to_unit_norm() {
        let mut r = Rng::new(11);
        let words = ["a", "dim", "bright", "disc", "square", "on", "dark", "background", "small", "large", "x1"];
        for _ in 0..1000 {
            let n = 1 + r.below(8);
            let s: Vec<&str> = (0..n).map(|_| words[r.below(words.len())]).collect();
            let v = embed_text(&s.join(" ")).unwrap();
            assert!((crate::tensor::norm(&v) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn direction_errors_and_enrichment() {
        assert!(matches!(edit_direction("a disc", "a disc"), Err(Error::Degenerate(_))));
        let target = "a bright small disc on dark background";
        let plain = edit_direction("a disc", target).unwrap();
        let rich = edit_direction("a dim small disc on dark background", target).unwrap();
        assert!(cosine(&plain, &rich) < 1.0);
    }

    proptest! {
        #[test]
        fn direction_is_unit_and_antisymmetric(a in "[a-z]{1,6}( [a-z]{1,6}){0,4}", b in "[a-z]{1,6}( [a-z]{1,6}){0,4}") {
            prop_assume!(embed_text(&a).unwrap() != embed_text(&b).unwrap());
            let d = edit_direction(&a, &b).unwrap();
            let r = edit_direction(&b, &a).unwrap();
            prop_assert!((crate::tensor::norm(&d) - 1.0).abs() < 1e-12);
            for (x, y) in d.iter().zip(&r) {
                prop_assert_eq!(*x, -*y);
            }
        }
    }
}
