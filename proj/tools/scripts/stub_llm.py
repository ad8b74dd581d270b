#!/usr/bin/env python3
"""Scripted OpenAI-compatible stub used to record the replay cassette.

Answers /v1/chat/completions with a canned reply chosen by which fixture
post appears after the final "Now give the output for this INPUT:" marker.
Unknown posts get the prompt echoed back. Usage:

    python3 tools/scripts/stub_llm.py --port 18080
"""

import argparse
import json
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

MARKER = "Now give the output for this INPUT:"

REPLIES = {
    "I have not slept properly in weeks.": """Sure, here are the sentences.

```json
{
  "annotations": {
    "Trouble-falling-or-staying-asleep-or-sleeping-too-much": [
      "I lie awake until four every night.",
      "I have not slept properly in weeks."
    ],
    "Poor-appetite-or-overeating": ["Food tastes like nothing, and I skip most meals."],
    "Feeling-down-depressed-or-hopeless": ["I still go to work but I feel heavy all day."],
    "Feeling-tired-or-having-little-energy": []
  }
}
```
Let me know if you need anything else.""",
    "I used to play guitar every evening.": """{
  "post_title": "the guitar",
  "annotations": {
    "Little-interest-or-pleasure-in-doing": ["Nothing seems fun anymore.",],
    "Thoughts-that-you-would-be-better-off-dead-or-of-hurting-yourself-in-some-way": [
      "I think everyone would be better without me around."
    ],
    "Feeling-bad-about-yourself-or-that-you-are-a-failure-or-have-let-yourself-or-your-family-down": [
      "I used to play guitar every evening."
    ],
  }
}""",
    "My exams start next week.": """Output:
{"annotations": {
  "Trouble-concentrating-on-things-such-as-reading-the-newspaper-or-watching-television": ["I read the same page ten times and nothing sticks."],
  "Feeling-bad-about-yourself-or-that-you-are-a-failure-or-have-let-yourself-or-your-family-down": [
    "I keep telling myself I am a failure, and that my parents wasted their money on me.",
    "I failed every class last year."
  ],
  "Anxiety": ["My exams start next week."]
}}""",
    "I cannot sit still at my desk.": """{
  "Moving-or-speaking-so-slowly-that-other-people-could-have-noticed-Or-the-opposite-being-so-fidgety-or-restless-that-you-have-been-moving-around-a-lot-more-than-usual": ["My leg bounces all day and my coworkers have noticed."],
  "Feeling-down-depressed-or-hopeless": ["Everything feels pointless lately."]
}""",
}


def reply_for(prompt: str) -> str:
    target = prompt.rsplit(MARKER, 1)[-1]
    for needle, reply in REPLIES.items():
        if needle in target:
            return reply
    return prompt  # degenerate echo


class Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        if not self.path.endswith("/chat/completions"):
            self.send_error(404)
            return
        prompt = "\n\n".join(m["content"] for m in body["messages"])
        out = json.dumps({
            "id": "stub",
            "object": "chat.completion",
            "model": body["model"],
            "choices": [{"index": 0, "finish_reason": "stop",
                         "message": {"role": "assistant", "content": reply_for(prompt)}}],
        }).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--port", type=int, default=18080)
    args = ap.parse_args()
    ThreadingHTTPServer(("127.0.0.1", args.port), Handler).serve_forever()


if __name__ == "__main__":
    main()
