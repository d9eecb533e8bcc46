"""Minibatch gradient evaluation shared by the trainers.

A worker is a (tape, loss_node, bind_fn) triple; bind_fn maps one training
example to the tape's input bindings. With one thread, examples are evaluated
sequentially on a single tape and the gradient reduction order is fixed, so
runs are bit-exact. With several threads each worker owns its own tape replica
and partial sums are reduced in completion order, which is NOT bit-exact
(floating-point addition is not associative); callers must say so in their
output headers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor, as_completed

import numpy as np

__all__ = ["Worker", "minibatch_gradients"]


class Worker:
    def __init__(self, tape, loss_node, bind_fn, param_names):
        self.tape = tape
        self.loss_node = loss_node
        self.bind_fn = bind_fn
        self.param_names = list(param_names)

    def evaluate(self, params: dict, examples) -> tuple:
        """Sum of losses and gradients over `examples`."""
        self.tape.bind(params)
        loss_sum = 0.0
        grad_sum = None
        for ex in examples:
            self.tape.bind(self.bind_fn(ex))
            loss_sum += float(self.tape.forward(self.loss_node))
            grads = self.tape.gradients(self.loss_node, self.param_names)
            if grad_sum is None:
                grad_sum = {k: np.array(v, dtype=np.float64) for k, v in grads.items()}
            else:
                for k, v in grads.items():
                    grad_sum[k] += v
        return loss_sum, grad_sum


def minibatch_gradients(workers: list, params: dict, examples: list) -> tuple:
    """Mean loss and mean gradients of a minibatch across the worker pool."""
    n = len(examples)
    if n == 0:
        raise ValueError("empty minibatch")
    if len(workers) == 1:
        loss_sum, grad_sum = workers[0].evaluate(params, examples)
    else:
        shards = [examples[i :: len(workers)] for i in range(len(workers))]
        shards = [s for s in shards if s]
        loss_sum = 0.0
        grad_sum = None
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            futures = [pool.submit(w.evaluate, params, s) for w, s in zip(workers, shards)]
            for fut in as_completed(futures):
                part_loss, part_grads = fut.result()
                loss_sum += part_loss
                if grad_sum is None:
                    grad_sum = part_grads
                else:
                    for k, v in part_grads.items():
                        grad_sum[k] += v
    loss = loss_sum / n
    grads = {k: v / n for k, v in grad_sum.items()}
    return loss, grads
