fn main() {
    // CLI wiring lands with the cli module.
    println!("seqrl");
}
