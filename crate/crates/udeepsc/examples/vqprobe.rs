use ndarray::Array2;
use std::collections::HashMap;
use udeepsc::codebook::quantize_rows;
use udeepsc::model::{Model, ModelConfig, RunOptions};
use udeepsc::nn::Session;
use udeepsc::tasks::{gen_sample, SampleData, Split, TaskId, TaskRegistry};
use udeepsc::features::Modality;

fn main() {
    let registry = TaskRegistry::standard(1, 4);
    let mut model = Model::<f32>::new(ModelConfig::default(), registry).unwrap();
    model.warm_start_codebook(0xb00c).unwrap();
    let def = model.task(TaskId::TxtRec).clone();
    // collect z_en rows and their tokens over a big batch
    let n = 64;
    let batch: Vec<SampleData> = (0..n).map(|i| gen_sample(&def.data, Split::Train, i).unwrap().0).collect();
    let tokens: Vec<Vec<usize>> = batch.iter().map(|d| match d { SampleData::Text(t) => t.clone(), _ => panic!() }).collect();
    let mut sess = Session::new(&model.params);
    let raw = model.preprocess(&batch, Modality::Text).unwrap();
    let opts = RunOptions::upper_bound(false);
    let fwd = model.transmit(&mut sess, TaskId::TxtRec, &batch, &opts).unwrap();
    let _ = raw;
    let z: &Array2<f32> = sess.tape.value(fwd.tx[0].z_en);
    let range = model.code_range(TaskId::TxtRec, Modality::Text);
    let ranges = vec![range.clone(); z.nrows()];
    let q = quantize_rows(z, &ranges, model.params.value(model.codebook)).unwrap();

    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &i in &q.indices { *counts.entry(i).or_insert(0) += 1; }
    let mut cv: Vec<usize> = counts.values().copied().collect();
    cv.sort_unstable_by(|a, b| b.cmp(a));
    println!("rows {} distinct codewords {} top5 counts {:?}", q.indices.len(), counts.len(), &cv[..cv.len().min(5)]);

    // token -> codeword purity
    let mut by_token: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut at = 0;
    for toks in &tokens {
        for &t in toks {
            by_token.entry(t).or_default().push(q.indices[at]);
            at += 1;
        }
    }
    let mut pure = 0.0;
    let mut total = 0.0;
    for (_, cws) in by_token.iter() {
        let mut c: HashMap<usize, usize> = HashMap::new();
        for &w in cws { *c.entry(w).or_insert(0) += 1; }
        let modal = *c.values().max().unwrap();
        pure += modal as f64;
        total += cws.len() as f64;
    }
    println!("token->codeword purity: {:.3} over {} tokens, mean dist^2 to codeword: {:.3}",
        pure / total, by_token.len(),
        {
            let mut d = 0.0;
            for (r, &i) in q.indices.iter().enumerate() {
                let mut s = 0.0f32;
                for c in 0..z.ncols() { let diff = z[[r, c]] - model.params.value(model.codebook)[[i, c]]; s += diff * diff; }
                d += s as f64;
            }
            d / q.indices.len() as f64
        });
    // row norm for scale reference
    let mean_norm: f64 = (0..z.nrows()).map(|r| z.row(r).iter().map(|v| (v * v) as f64).sum::<f64>()).sum::<f64>() / z.nrows() as f64;
    println!("mean row norm^2: {mean_norm:.3}");
}
