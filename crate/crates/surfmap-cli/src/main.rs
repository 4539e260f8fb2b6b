fn main() {
    println!("surfmap cli placeholder");
}
