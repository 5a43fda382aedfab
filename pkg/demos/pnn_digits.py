"""Train the orthogonal proximal network on the 8x8 digits set.

Every hidden weight matrix is projected back onto the Stiefel manifold
after each step, so the hidden stack stays 1-Lipschitz throughout.  Prints
train loss, test accuracy and the orthogonality error per epoch.
"""

from ispalm.optim import SolverConfig, run
from ispalm.pnn import PnnProblem, accuracy, init_weights, load_digits_8x8, one_hot, orthogonality_error
from ispalm.rng import Rng

X_train, y_train, X_test, y_test = load_digits_8x8()
widths = (64, 32, 16)
problem = PnnProblem(X_train, one_hot(y_train), widths)
start = init_weights(Rng(0), X_train.shape[1], widths)


def report(epoch, u):
    loss = problem.eval_batch(u)
    print(f"epoch {epoch:2d}  loss {loss:.4f}  test acc {accuracy(u, X_test, y_test):.3f}  "
          f"orth err {orthogonality_error(u):.1e}")


cfg = SolverConfig(algorithm="iSPALM", batch_size=65, step_scale=2.0, epochs=10, seed=0)
run(problem, start, problem.prox_ops(), cfg, callback=report)
