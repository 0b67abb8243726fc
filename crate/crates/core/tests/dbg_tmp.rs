use s2me::data::*;
#[test]
fn dbg() {
    let d = generate_synthetic_dataset(&GenConfig::new(8, 0, 0, 64, 1)).unwrap();
    d.save(std::path::Path::new("/tmp/ds")).unwrap();
    println!("STATS {:?}", d.stats());
    let d = generate_synthetic_dataset(&GenConfig::new(200, 50, 50, 64, 1)).unwrap();
    println!("STATS {:?}", d.stats());
}
