//! Transcript quality: per-utterance WER plus corpus WER, BLEU and GLEU.
//!
//! cargo run --example text_metrics [pairs.jsonl]

use std::path::PathBuf;

use imbser::metrics::{read_pairs, wer, BleuSmoothing, TextMetricReport, Tokenizer, TranscriptPair};

fn main() -> imbser::Result<()> {
    let pairs = match std::env::args().nth(1) {
        Some(p) => read_pairs(&PathBuf::from(p))?,
        None => [
            ("u1", "I can't believe it's already Friday.", "i cant believe its already friday"),
            ("u2", "Please close the door behind you", "please close the door behind"),
            ("u3", "We should leave before the rain starts", "we should leave before the train starts"),
        ]
        .into_iter()
        .map(|(id, r, h)| TranscriptPair { id: id.into(), reference: r.into(), hypothesis: h.into() })
        .collect(),
    };
    let tok = Tokenizer::default();
    for p in &pairs {
        println!("{:<6} WER {:>6.2}%", p.id, 100.0 * wer(&tok.tokenize(&p.reference), &tok.tokenize(&p.hypothesis))?);
    }
    println!();
    print!("{}", TextMetricReport::compute(&pairs, tok, BleuSmoothing::AddOne)?);
    Ok(())
}
