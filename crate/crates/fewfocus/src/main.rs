fn main() {
    println!("fewfocus");
}
