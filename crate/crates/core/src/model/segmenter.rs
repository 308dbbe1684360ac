use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{AdapterConfig, ModelConfig};
use super::decoder::MaskDecoder;
use super::encoder::ImageEncoder;
use super::prompt::{BBox, PromptEncoder};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::param::impl_module;
use crate::nn::{Mode, Module};
use crate::peft::{count_parameters, ParamCount};
use crate::tensor::{Element, Tensor};

/// Independent random streams per component, so the backbone does not
/// depend on adapter or decoder shapes.
pub fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const BACKBONE_STREAM: u64 = 1;
const PROMPT_STREAM: u64 = 2;
const ADAPTER_STREAM: u64 = 3;
const DECODER_STREAM: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentCount {
    pub component: String,
    #[serde(flatten)]
    pub count: ParamCount,
}

/// Promptable segmenter: frozen encoders, adapters and a trainable decoder.
#[derive(Clone, Debug)]
pub struct Segmenter<T> {
    pub encoder: ImageEncoder<T>,
    pub prompt: PromptEncoder<T>,
    pub decoder: MaskDecoder<T>,
    pub config: ModelConfig,
}

impl_module!(Segmenter {
    encoder,
    prompt,
    decoder
});

impl<T: Element> Segmenter<T> {
    pub fn new(cfg: &ModelConfig, adapters: &AdapterConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        adapters.validate(cfg)?;
        let mut encoder = ImageEncoder::new(cfg, &mut component_rng(seed, BACKBONE_STREAM));
        encoder.attach_adapters(adapters, &mut component_rng(seed, ADAPTER_STREAM))?;
        let mut prompt = PromptEncoder::new(cfg.corner_embed_dim, cfg.img_size, &mut component_rng(seed, PROMPT_STREAM));
        prompt.set_trainable(false);
        let decoder = MaskDecoder::new(cfg, &mut component_rng(seed, DECODER_STREAM))?;
        Ok(Segmenter {
            encoder,
            prompt,
            decoder,
            config: cfg.clone(),
        })
    }

    /// Same weights with every adapter removed.
    pub fn without_adapters(&self) -> Self {
        Segmenter {
            encoder: self.encoder.without_adapters(),
            ..self.clone()
        }
    }

    pub fn count(&self) -> ParamCount {
        count_parameters(self)
    }

    /// Counts per component; the rows sum to [`Segmenter::count`].
    pub fn count_by_component(&self) -> Vec<ComponentCount> {
        let adapters = self.encoder.adapters();
        let lora = adapters
            .iter()
            .fold(ParamCount::default(), |acc, (_, a)| acc.merge(count_parameters(&a.lora)));
        let attention = adapters.iter().fold(ParamCount::default(), |acc, (_, a)| {
            a.attention.as_ref().map_or(acc, |m| acc.merge(count_parameters(m)))
        });
        let rows = [
            ("encoder_backbone", count_parameters(&self.encoder.without_adapters())),
            ("lora", lora),
            ("atrous_attention", attention),
            ("prompt_encoder", count_parameters(&self.prompt)),
            ("mask_decoder", count_parameters(&self.decoder)),
            ("total", self.count()),
        ];
        rows.into_iter()
            .map(|(name, count)| ComponentCount {
                component: name.to_string(),
                count,
            })
            .collect()
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        images: Var<'t, T>,
        boxes: &[BBox],
        mode: Mode,
    ) -> Result<Var<'t, T>> {
        let b = images.shape().first().copied().unwrap_or(0);
        if boxes.len() != b {
            return Err(Error::shape("forward_segment", format!("{} boxes for batch {b}", boxes.len())));
        }
        let emb = self.encoder.forward(tape, images, mode)?;
        let prompt = tape.constant(&self.prompt.encode_batch(boxes)?);
        let dense = tape.constant(&self.prompt.dense(self.config.grid()));
        self.decoder.forward(tape, emb, prompt, dense, self.config.img_size)
    }

    /// Inference-mode probabilities `[B, 1, S, S]`.
    pub fn predict(&self, images: &Tensor<T>, boxes: &[BBox]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let x = tape.constant(images);
        Ok(self.forward(&tape, x, boxes, Mode::Eval)?.to_tensor())
    }
}
