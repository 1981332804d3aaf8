"""Generates the bundled sample corpus: short synthetic children's stories.

The output is produced from the templates below with a fixed seed, so the
file can be regenerated byte-for-byte:

    python3 make_stories.py > stories.txt
"""
import random

rng = random.Random(20240611)

NAMES = ["Lily", "Tom", "Mia", "Ben", "Sam", "Anna", "Max", "Zoe", "Leo", "Ella",
         "Jack", "Lucy", "Finn", "Ruby", "Noah", "Ivy", "Otto", "Nora", "Milo", "Rosa"]
ANIMALS = ["cat", "dog", "bird", "bunny", "frog", "duck", "bear", "fox", "mouse", "pig",
           "owl", "turtle", "lamb", "puppy", "kitten"]
PLACES = ["a small house", "a big forest", "a quiet town", "a sunny farm", "a tall tree",
          "a little village", "a green park", "a cozy barn", "a blue lake", "a busy city"]
THINGS = ["ball", "kite", "box", "hat", "cake", "book", "toy car", "red apple", "flower",
          "shiny stone", "balloon", "cookie", "blanket", "boat", "drum"]
ADJS = ["happy", "sad", "kind", "brave", "shy", "silly", "sleepy", "curious", "tiny", "big"]
FEEL = ["happy", "sad", "scared", "excited", "proud", "tired", "surprised", "glad"]
ACTS = ["play", "run", "jump", "dance", "sing", "swim", "read", "paint", "climb", "dig"]
WEATHER = ["sunny", "rainy", "windy", "cold", "warm", "snowy", "cloudy"]


def story():
    a, b = rng.sample(NAMES, 2)
    animal = rng.choice(ANIMALS)
    place = rng.choice(PLACES)
    thing = rng.choice(THINGS)
    adj = rng.choice(ADJS)
    act = rng.choice(ACTS)
    act2 = rng.choice(ACTS)
    day = rng.choice(WEATHER)
    f1, f2 = rng.sample(FEEL, 2)
    s = []
    s.append(rng.choice([
        f"Once upon a time, there was a {adj} {animal} named {a}.",
        f"One day, a {adj} {animal} named {a} lived in {place}.",
        f"There was once a little {animal} called {a}.",
    ]))
    s.append(rng.choice([
        f"{a} lived in {place} with a friend named {b}.",
        f"{a} loved to {act} every day.",
        f"Every morning, {a} liked to {act} with {b}.",
    ]))
    s.append(rng.choice([
        f"It was a {day} day.",
        f"The day was {day} and the sky was big.",
        f"One {day} morning, {a} went outside.",
    ]))
    s.append(rng.choice([
        f"{a} found a {thing} near the tree.",
        f"{b} had a {thing} and {a} wanted to see it.",
        f"{a} saw a {thing} on the ground.",
        f"Mom gave {a} a {thing}.",
    ]))
    s.append(rng.choice([
        f"{a} felt {f1}.",
        f"{a} was very {f1} and smiled.",
        f"\"Look at my {thing}!\" said {a}.",
        f"\"Can I play with your {thing}?\" asked {b}.",
    ]))
    s.append(rng.choice([
        f"{b} said, \"Let us {act2} together!\"",
        f"They decided to {act2} in {place}.",
        f"{a} and {b} wanted to {act2}.",
        f"But then the {thing} was lost.",
    ]))
    s.append(rng.choice([
        f"They looked and looked, and at last they found the {thing}.",
        f"{b} helped {a}, and they shared the {thing}.",
        f"They played until the sun went down.",
        f"{a} learned that it is good to share.",
    ]))
    s.append(rng.choice([
        f"In the end, {a} and {b} were {f2}.",
        f"{a} was {f2} and went home to sleep.",
        f"From that day on, {a} and {b} were best friends.",
        f"The {animal} was {f2}, and everyone smiled.",
    ]))
    return " ".join(s)


def main():
    out = []
    total = 0
    while total < 200_000:
        st = story()
        out.append(st)
        total += len(st) + 2
    print("\n\n".join(out))


if __name__ == "__main__":
    main()
