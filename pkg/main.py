import logging

from pynoiselayout import HeadParams, PromptSpec, RunConfig, SimConfig, generate


def main():
    logging.basicConfig(level=logging.INFO)
    sim = SimConfig(height=32, width=32, steps=10)
    params = HeadParams.init(sim.channels)
    trace = generate(RunConfig(PromptSpec.parse('dog:2,cat:1'), seed=0, sim=sim),
                     params)
    print(trace.final_layout)


if __name__ == '__main__':
    main()
