use std::time::Instant;

use bmgf::config::ModelConfig;
use bmgf::data::Split;
use bmgf::model::Model;
use bmgf::synthetic;
use bmgf::train::{evaluate, train};

fn main() {
    let ds = synthetic::standard(7);
    let (tr, va, te) = (ds.subset(Split::Train), ds.subset(Split::Validation), ds.subset(Split::Test));
    let config = ModelConfig { d_model: 64, seed: 7, ..ModelConfig::default() };
    let model = Model::from_instances(config, ds.schema.clone(), &tr.instances).unwrap();
    println!("{} parameters", model.num_parameters());
    let t = Instant::now();
    let out = train(model, &tr.instances, &va.instances).unwrap();
    for h in &out.history {
        println!("{:?}", h);
    }
    println!("train acc {:.3}", evaluate(&out.model, &tr.instances).unwrap().accuracy);
    println!("test acc {:.3}", evaluate(&out.model, &te.instances).unwrap().accuracy);
    println!("elapsed {:?}", t.elapsed());
}
