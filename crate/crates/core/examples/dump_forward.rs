// Scratch: dumps one encoder forward pass as JSON for an external
// cross-check. Not part of the deliverable.

use tinyvlm_core::data::{gen_toy_sample, tokenize, GenOptions};
use tinyvlm_core::encoder::encode_full;
use tinyvlm_core::model::{Model, ModelConfig};
use tinyvlm_core::tensor::tape::Tape;

fn main() {
    let model = Model::new(ModelConfig::default(), 424242).unwrap();
    let opts = GenOptions { image_side: 32, ..GenOptions::default() };
    let sample = gen_toy_sample(99, 0, &opts);
    let ids = tokenize(&sample.turns[0].question, model.cfg.decoder.vocab_size);

    let mut tape = Tape::new();
    let out = encode_full(&mut tape, &model, &sample.image, &ids).unwrap();

    // Dump weights by name.
    let mut params = serde_json::Map::new();
    for id in model.store.ids() {
        let t = model.store.tensor(id);
        params.insert(
            model.store.name(id).to_string(),
            serde_json::json!({ "shape": t.shape(), "data": t.data() }),
        );
    }
    let dump = serde_json::json!({
        "image": { "h": sample.image.height(), "w": sample.image.width(), "data": sample.image.data() },
        "token_ids": ids,
        "params": params,
        "v_img": tape.value(out.v_img).data(),
        "e_txt": tape.value(out.e_txt).data(),
        "v_txt": tape.value(out.v_txt).data(),
        "v_f_img": tape.value(out.fused.v_f_img).data(),
        "v_f_txt": tape.value(out.fused.v_f_txt).data(),
        "e_img": tape.value(out.e_img).data(),
        "layer1_v_img": tape.value(out.states[0].v_img).data(),
    });
    println!("{}", serde_json::to_string(&dump).unwrap());
}
