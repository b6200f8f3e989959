//! Corpus BLEU and self-BLEU on whitespace tokens.

use sundae::eval::{bleu, self_bleu, BleuConfig};

fn words(lines: &[&str]) -> Vec<Vec<String>> {
    lines.iter().map(|l| l.split_whitespace().map(String::from).collect()).collect()
}

fn main() -> sundae::Result<()> {
    let cfg = BleuConfig::default();
    let refs = words(&["the cat sat on the mat", "a dog ran in the park"]);
    let hyps = words(&["the cat sat on a mat", "a dog ran in the big park"]);
    println!("bleu(hyps, refs) = {:.2}", bleu(&hyps, &refs, &cfg)?);
    println!("bleu(refs, refs) = {:.2}", bleu(&refs, &refs, &cfg)?);
    let samples = words(&["the cat sat on the mat", "the cat sat on the mat", "a red bird flew over the mat"]);
    println!("self-bleu = {:.2}", self_bleu(&samples, &cfg)?);
    Ok(())
}
