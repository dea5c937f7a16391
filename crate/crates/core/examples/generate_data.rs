//! Synthetic Gaussian and two-moons datasets, split 2:1 and round-tripped
//! through the line-delimited file format.

use implicit_meanfield::data::{default_moons_noise, gen_gaussian, gen_moons, load_dataset, save_dataset};

fn main() -> implicit_meanfield::Result<()> {
    let gauss = gen_gaussian(300, 30, 5, 7)?;
    let moons = gen_moons(300, 30, 5, default_moons_noise(), 7)?;
    let dir = std::env::temp_dir().join("imf-generate-data");
    std::fs::create_dir_all(&dir)?;
    for ds in [gauss, moons] {
        let (train, test) = ds.split()?;
        let path = dir.join(format!("{}-train.jsonl", ds.meta.name));
        save_dataset(&train, &path)?;
        let back = load_dataset(&path)?;
        let first = &back.samples()[0];
        println!(
            "{:<8} train {} / test {}  |V| = {}  d_f = {}  first S* = {:?}",
            ds.meta.name,
            train.len(),
            test.len(),
            first.ground_size(),
            first.feature_dim(),
            first.optimal()
        );
    }
    println!("files in {}", dir.display());
    Ok(())
}
