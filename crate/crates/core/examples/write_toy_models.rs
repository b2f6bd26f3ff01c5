//! Writes the built-in toy models, a sample input for each and golden traces.
//!
//! ```text
//! cargo run --example write_toy_models -- <out-dir>
//! ```

use std::path::PathBuf;

use naflow::image::write_raw_f32;
use naflow::model::golden::{capture_golden, save_golden};
use naflow::model::save_model;
use naflow::model::toy::{
    conv_pool_input, conv_pool_model, toy_classifier, toy_embedding, toy_four_layer, toy_input, toy_strided,
};
use naflow::Exec;

fn main() -> naflow::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "toy-models".into()));
    let models = [
        (toy_classifier(), None),
        (toy_four_layer(), None),
        (toy_embedding(), None),
        (toy_strided(), None),
        (conv_pool_model(), Some(conv_pool_input())),
    ];
    for (model, input) in models {
        let dir = out.join(model.name());
        std::fs::create_dir_all(&dir).map_err(|e| naflow::Error::io(&dir, e))?;
        save_model(&model, &dir)?;
        let input = input.unwrap_or_else(|| toy_input(model.input_shape(), 7));
        write_raw_f32(&input, &dir.join("input.f32"))?;
        save_golden(&capture_golden(&model, &input, Exec::Sequential)?, &dir)?;
        println!("{}", dir.display());
    }
    Ok(())
}
