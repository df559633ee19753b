use std::time::Instant;

use dgdetr_core::RngStream;
use dgdetr_toydetr::loss::{detection_loss, match_prediction, LossScale, LossWeights};
use dgdetr_toydetr::model::NoiseSource;
use dgdetr_toydetr::scene::generate_set;
use dgdetr_toydetr::{DomainSpec, ModelConfig, RunMode, ToyDetr};

fn main() {
    let model = ToyDetr::new(ModelConfig::default()).unwrap();
    let p = model.init_params(&mut RngStream::new(0));
    println!("params {}", model.num_params());
    let scenes = generate_set(1, 100, &DomainSpec::source());
    let w = LossWeights::default();
    let mut grads = vec![0.0; p.len()];
    let t = Instant::now();
    let mut rng = RngStream::new(3);
    for s in &scenes {
        let (pred, tape) = model.forward(&p, &s.image, RunMode::Train, NoiseSource::Sample(&mut rng), None).unwrap();
        let m = match_prediction(&pred, &s.ground_truth(), &w).unwrap();
        let (_, g) = detection_loss(&pred, &s.ground_truth(), &m, &w, LossScale { objects: 2.0, images: 1.0 }).unwrap();
        model.backward(&p, tape, &g, &mut grads).unwrap();
    }
    println!("train step per image: {:.2} ms", t.elapsed().as_secs_f64() * 10.0);
    let t = Instant::now();
    for s in &scenes {
        model.forward(&p, &s.image, RunMode::Infer, NoiseSource::Sample(&mut rng), None).unwrap();
    }
    println!("infer per image: {:.2} ms", t.elapsed().as_secs_f64() * 10.0);
    let t = Instant::now();
    let _ = generate_set(2, 100, &DomainSpec::shifted_presets()[2]);
    println!("scene gen per image: {:.2} ms", t.elapsed().as_secs_f64() * 10.0);
}
