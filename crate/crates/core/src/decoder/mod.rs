//! Stacked LSTM caption decoder with attention, two interchangeable output
//! heads, teacher-forced training losses and greedy decoding.
//!
//! Layer 0 consumes `[v_prev ; c_t]` (previous word embedding and attention
//! context); each deeper layer consumes the hidden output of the layer
//! below. The head reads the top layer's output:
//!
//! * [`HeadKind::Regression`] maps it to a `d`-vector trained by mean squared
//!   error against the embedding of the next word,
//! * [`HeadKind::Softmax`] maps it to `|V|` logits trained by cross-entropy.

mod lstm;
mod model;

pub use lstm::{lstm_step, BoundLstm, LayerState, LstmLayerParams};
pub use model::{
    greedy_decode, param_count, sequence_loss, stacked_step, teacher_forced_loss, BoundModel, CaptionModel,
    Decoded, DecoderState, Dropout, HeadKind, ModelConfig, OutputHead, ScheduledSampling, SequenceOutput,
};
