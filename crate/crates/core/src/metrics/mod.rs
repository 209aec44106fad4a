//! Classification metrics (Macro-F1, WA as balanced accuracy, UA as plain
//! accuracy) and transcript-quality metrics (WER, BLEU, GLEU).

mod classification;
mod text;

pub use classification::{macro_f1, wa_ua, ClassMetrics, ConfusionMatrix, MetricBundle, CONVENTIONS};
pub use text::{
    bleu, corpus_wer, edit_distance, gleu, read_pairs, wer, BleuSmoothing, TextMetricReport, Tokenizer,
    TranscriptPair, MAX_ORDER,
};
