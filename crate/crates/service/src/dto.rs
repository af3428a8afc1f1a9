use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use embnav_core::feedback::Point2;
use embnav_core::io::png_bytes;
use embnav_core::{ImageTensor, Session};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointDto {
    pub x: f64,
    pub y: f64,
}

impl From<Point2> for PointDto {
    fn from(p: Point2) -> Self {
        Self { x: p.x, y: p.y }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceDto {
    pub index: usize,
    /// Base64 PNG.
    pub image: String,
    pub projection: PointDto,
    pub prompt: String,
    pub modifier: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntryDto {
    pub step: usize,
    pub choice: usize,
    pub alpha: f64,
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionStateDto {
    pub session_id: String,
    pub step: usize,
    pub prompt: String,
    pub seed: u64,
    pub k: usize,
    pub kappa: f64,
    /// Base64 PNG.
    pub current_image: String,
    pub current_projection: PointDto,
    pub choices: Vec<ChoiceDto>,
    pub history: Vec<HistoryEntryDto>,
    /// Content hash of the current embedding.
    pub embedding_hash: String,
}

fn encode_png(image: &ImageTensor) -> embnav_core::Result<String> {
    Ok(STANDARD.encode(png_bytes(image)?))
}

impl SessionStateDto {
    pub fn from_session(s: &Session) -> embnav_core::Result<Self> {
        let (current_projection, choices) = match s.choices() {
            Some(set) => {
                let pts = &set.projection.points;
                let choices = set
                    .candidates
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        Ok(ChoiceDto {
                            index: i,
                            image: encode_png(&c.image)?,
                            projection: pts[i + 1].into(),
                            prompt: c.prompt.clone(),
                            modifier: c.modifier.clone(),
                        })
                    })
                    .collect::<embnav_core::Result<Vec<_>>>()?;
                (pts[0].into(), choices)
            }
            None => (PointDto { x: 0.0, y: 0.0 }, Vec::new()),
        };
        let history = s
            .history()
            .iter()
            .enumerate()
            .map(|(i, h)| HistoryEntryDto {
                step: i,
                choice: h.choice,
                alpha: h.alpha,
                prompt: h.candidates[h.choice].prompt.clone(),
            })
            .collect();
        Ok(Self {
            session_id: s.id().to_string(),
            step: s.step(),
            prompt: s.prompt().as_str().to_string(),
            seed: s.seed(),
            k: s.config().k,
            kappa: s.config().kappa,
            current_image: encode_png(s.image())?,
            current_projection,
            choices,
            history,
            embedding_hash: s.current().content_hash(),
        })
    }

    /// Decoded PNG bytes of the current image.
    pub fn current_png(&self) -> Vec<u8> {
        STANDARD.decode(&self.current_image).expect("service emits valid base64")
    }
}
