//! Saving a model with its architecture and loading it back for inference.

use implicit_meanfield::cli::output::{load_model, save_model};
use implicit_meanfield::setfn::{Architecture, SetFunctionModel};

fn main() -> implicit_meanfield::Result<()> {
    let model = SetFunctionModel::init(Architecture::standard(2), 9)?;
    let path = std::env::temp_dir().join("imf-model.json");
    save_model(&model, &path)?;
    let back = load_model(&path)?;
    println!("{} parameters in {} segments, identical after reload: {}", back.num_params(), back.params().segments().len(), back.params() == model.params());
    Ok(())
}
