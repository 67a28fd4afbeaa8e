use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::PretrainConfig;
use crate::error::Result;
use crate::objective::{nll_on, Masking, TrainPair};
use crate::seq2seq::{Seq2SeqModel, UNK};
use crate::tensor::Tape;

use super::optim::{clip_global_norm, Adam};

/// Denoising pretraining: each text is encoded with a fraction of its tokens
/// replaced by UNK and the decoder reconstructs the original. Returns the mean
/// loss of the last epoch.
pub fn pretrain<R: Rng>(model: &mut Seq2SeqModel, texts: &[String], cfg: &PretrainConfig, rng: &mut R) -> Result<f64> {
    let keep = model.config().max_target_len - 1;
    let originals: Vec<Vec<usize>> = texts
        .iter()
        .map(|t| {
            let mut ids = model.vocab().encode(t);
            ids.truncate(keep);
            ids
        })
        .filter(|ids| !ids.is_empty())
        .collect();
    let mut opt = Adam::new(cfg.lr);
    let mut last = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..originals.len()).collect();
        order.shuffle(rng);
        let (mut sum, mut n) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainPair> = chunk
                .iter()
                .map(|&i| {
                    let y = &originals[i];
                    let x = y
                        .iter()
                        .map(|&t| if rng.gen::<f64>() < cfg.mask_rate { UNK } else { t })
                        .collect();
                    TrainPair::new(x, y, None)
                })
                .collect();
            let mut tape = Tape::new();
            let p = model.bind(&mut tape, true);
            let loss = nll_on(&mut tape, model, &p, &batch, Masking::Full)?;
            let grads = tape.backward(loss.total)?;
            let mut g = p.collect(&tape, &grads);
            clip_global_norm(&mut g, 1.0);
            opt.update(model.params_mut(), &g)?;
            sum += tape.value(loss.total).data()[0];
            n += 1;
        }
        last = sum / n.max(1) as f64;
        log::info!("pretrain epoch {} loss {last:.4}", epoch + 1);
    }
    Ok(last)
}
