fn main() {
    println!("dtn-lab");
}
